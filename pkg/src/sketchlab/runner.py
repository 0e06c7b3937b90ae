"""Experiment orchestration: dataset/model plumbing, runs, and metric export.

Every run resolves its config, seeds deterministically, writes checkpoints
and metrics into its output directory, and can be replayed bit-identically
from (config, seed).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import write_resolved
from .models import (CosineClassifier, GATLayer, GaussianPolicyHead,
                     GMMDecoderHead, RasterEncoder, StrokeHierEncoder)
from .optim import load_checkpoint, save_checkpoint
from .ranking import evaluate_accuracy, train_triplet
from .synthetic import gen_synthetic_dataset, load_dataset, save_dataset

MODEL_REGISTRY = {
    "raster_encoder": RasterEncoder,
    "stroke_encoder": StrokeHierEncoder,
    "gaussian_policy": GaussianPolicyHead,
    "gat": GATLayer,
    "cosine_classifier": CosineClassifier,
    "gmm_decoder": GMMDecoderHead,
}


def register_model(arch, cls):
    MODEL_REGISTRY[arch] = cls


def save_model(model, path) -> None:
    save_checkpoint(path, model.params,
                    extra={"arch": model.arch, "kwargs": model.ckpt_kwargs})


def load_model(path):
    params, extra = load_checkpoint(path)
    arch = extra["arch"]
    if arch not in MODEL_REGISTRY:
        raise ValueError(f"unknown model arch '{arch}' in checkpoint {path}")
    model = MODEL_REGISTRY[arch](**extra.get("kwargs", {}))
    model.load_state_arrays({k: v.data for k, v in params.items()})
    return model


def dataset_from_config(cfg: dict):
    d = cfg["dataset"]
    if d.get("path"):
        return load_dataset(d["path"])
    return gen_synthetic_dataset(d["seed"], d["n_classes"], d["n_instances"],
                                 d["noise_strokes"], height=d["height"],
                                 width=d["width"])


def encoder_from_config(cfg: dict, instances, train: bool = True):
    """Either load the referenced encoder checkpoint or triplet-train one."""
    if cfg.get("encoder_checkpoint"):
        return load_model(cfg["encoder_checkpoint"])
    e = cfg["embed"]
    d = cfg["dataset"]
    enc = RasterEncoder(height=d["height"], width=d["width"], grid=e["grid"],
                        channels=e["channels"], embed_dim=e["embed_dim"],
                        seed=cfg["seed"])
    if train:
        sketch_of = (lambda i: i.clean_sketch()) if e["use_clean_strokes"] else None
        train_triplet(enc, instances, margin=e["margin"], epochs=e["epochs"],
                      batch_size=e["batch"], lr=e["lr"], seed=cfg["seed"],
                      sketch_of=sketch_of)
    return enc


# -- metric files -------------------------------------------------------------

METRIC_COLUMNS = ["tag", "acc@1", "acc@5", "acc@10", "m@A", "m@B", "backlash"]


def _sig6(x):
    if isinstance(x, (bool, int, np.integer)):
        return x
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.6g}") if np.isfinite(x) else float(x)
    return x


def write_metrics(run_dir, rows: list[dict]) -> tuple[Path, Path]:
    """Stable-column CSV plus a JSON summary, numbers at 6 significant digits."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _sig6(row.get(c, "")) if row.get(c, "") != ""
                             else "" for c in METRIC_COLUMNS})
    json_path = run_dir / "metrics.json"
    payload = [{k: _sig6(v) if isinstance(v, (int, float, np.floating)) else v
                for k, v in row.items()} for row in rows]
    json_path.write_text(json.dumps(payload, indent=2))
    return csv_path, json_path


def export_metrics(run_dir) -> tuple[Path, Path]:
    """Re-emit metrics.{csv,json} from a completed run's raw rows."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    raw = run_dir / "metrics_raw.json"
    rows = json.loads(raw.read_text()) if raw.exists() else []
    return write_metrics(run_dir, rows)


def _store_raw(run_dir, rows):
    Path(run_dir, "metrics_raw.json").write_text(json.dumps(rows, indent=2))


def _standard_row(tag, acc: dict | None = None, otf: dict | None = None) -> dict:
    row = {"tag": tag}
    if acc:
        row.update({"acc@1": acc.get("acc@1"), "acc@5": acc.get("acc@5"),
                    "acc@10": acc.get("acc@10")})
    if otf:
        row.update({"m@A": otf.get("m@A"), "m@B": otf.get("m@B"),
                    "backlash": otf.get("backlash"),
                    "acc@1": otf.get("acc@1", row.get("acc@1")),
                    "acc@5": otf.get("acc@5", row.get("acc@5")),
                    "acc@10": otf.get("acc@10", row.get("acc@10"))})
    return row


# -- per-command runs -----------------------------------------------------------

def run(command: str, cfg: dict, dry_run: bool = False) -> Path:
    """Execute one configured experiment; returns the run directory."""
    runner = {
        "gen-data": _run_gen_data,
        "train-embed": _run_train_embed,
        "train-otf": _run_train_otf,
        "train-subset": _run_train_subset,
        "train-semisup": _run_train_semisup,
        "pretrain-ssl": _run_pretrain_ssl,
        "linear-eval": _run_linear_eval,
        "fscil": _run_fscil,
        "oracle": _run_oracle,
        "augment": _run_augment,
        "eval": _run_eval,
    }[command]
    out = Path(cfg.get("output_dir", "runs/run"))
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    if dry_run:
        return out
    runner(cfg, out)
    return out


def _run_gen_data(cfg, out):
    instances = dataset_from_config(cfg)
    save_dataset(instances, out / "dataset")
    rows = [{"tag": f"gen-data:{len(instances)}"}]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _run_train_embed(cfg, out):
    instances = dataset_from_config(cfg)
    enc = encoder_from_config(cfg, instances, train=True)
    save_model(enc, out / "encoder.ckpt")
    acc = evaluate_accuracy(enc, instances)
    rows = [_standard_row("train-embed", acc=acc)]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _run_train_otf(cfg, out):
    from .otf import PPOConfig, RewardScheme, train_otf

    instances = dataset_from_config(cfg)
    enc = encoder_from_config(cfg, instances, train=True)
    scheme = RewardScheme(variant=cfg["reward"]["scheme"],
                          gamma1=cfg["reward"]["gamma1"],
                          gamma2=cfg["reward"]["gamma2"], q=cfg["reward"]["q"])
    ppo = PPOConfig(variant=cfg["ppo"]["variant"],
                    clip_epsilon=cfg["ppo"]["epsilon"],
                    kl_coef=cfg["ppo"]["kl_coef"],
                    steps=cfg["T"], batch_size=cfg["batch"])
    log_path = out / "diagnostics.jsonl"
    with open(log_path, "w") as f:
        def log(epoch, diag):
            f.write(json.dumps({"epoch": epoch, **{k: _sig6(v) for k, v in
                                                   diag.items()}}) + "\n")
        policy, report = train_otf(instances, enc, scheme, ppo,
                                   epochs=cfg["epochs"], lr=cfg["lr"],
                                   seed=cfg["seed"], log=log)
    save_model(enc, out / "encoder.ckpt")
    save_checkpoint(out / "policy.ckpt", policy.head.params,
                    extra={"arch": "gaussian_policy",
                           "kwargs": policy.head.ckpt_kwargs})
    rows = [_standard_row("otf-before", otf=report["before"]),
            _standard_row("otf-after", otf=report["after"])]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _run_train_subset(cfg, out):
    from .subset import (SubsetMDPConfig, apply_selector, train_subset_selector)
    from .synthetic import with_fresh_noise

    instances = dataset_from_config(cfg)
    enc = encoder_from_config(cfg, instances, train=True)
    sub_cfg = SubsetMDPConfig(
        episode_length=cfg["episode_length"], omega1=cfg["omega1"],
        omega2=cfg["omega2"], clip_epsilon=cfg["epsilon"], c1=cfg["c1"],
        c2=cfg["c2"], old_refresh_every=cfg["old_refresh_every"],
        margin=cfg["margin"])
    rng = np.random.Generator(np.random.PCG64(cfg["seed"] + 1))
    n_noise = cfg["dataset"]["noise_strokes"]
    selector = None
    for phase in range(cfg["phases"]):
        views = ([with_fresh_noise(i, n_noise, rng) for i in instances]
                 if n_noise else instances)
        selector = train_subset_selector(views, enc, sub_cfg,
                                         iterations=cfg["iterations"],
                                         lr=cfg["lr"], seed=cfg["seed"] + phase,
                                         selector=selector, hidden=cfg["hidden"])
    save_model(selector, out / "selector.ckpt")
    save_model(enc, out / "encoder.ckpt")
    masks = apply_selector(instances, selector)
    (out / "masks.json").write_text(json.dumps(
        {str(k): np.asarray(v).astype(bool).tolist() for k, v in masks.items()},
        indent=0))
    noisy = evaluate_accuracy(enc, instances)
    cleaned = evaluate_accuracy(
        enc, instances, sketch_of=lambda i: i.sketch.select(masks[i.instance_id]))
    rows = [_standard_row("subset-noisy", acc=noisy),
            _standard_row("subset-cleaned", acc=cleaned)]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _run_train_semisup(cfg, out):
    from .semisup import (JointConfig, PairDiscriminator, PhotoToSketchGenerator,
                          joint_train, pretrain_generator)

    instances = dataset_from_config(cfg)
    frac = cfg["labelled_frac"]
    per_class = cfg["dataset"]["n_instances"]
    k_lab = max(1, int(round(frac * per_class)))
    labelled = [i for i in instances if i.instance_id % per_class < k_lab]
    unlabelled = [i for i in instances if i.instance_id % per_class >= k_lab]
    enc = encoder_from_config(cfg, labelled, train=True)
    g = cfg["generator"]
    d = cfg["dataset"]
    gen = PhotoToSketchGenerator(height=d["height"], width=d["width"],
                                 latent=g["latent"], hidden=g["hidden"],
                                 mixtures=g["mixtures"], att_dim=g["att_dim"],
                                 max_len=g["max_len"], seed=cfg["seed"] + 1)
    pretrain_generator(gen, labelled, epochs=g["epochs"], lr=g["lr"],
                       seed=cfg["seed"] + 2)
    disc = PairDiscriminator(height=d["height"], width=d["width"],
                             seed=cfg["seed"] + 3)
    j = cfg["joint"]
    jc = JointConfig(kd_weight=j["kd_weight"], kl_weight=j["kl_weight"],
                     pg_weight=j["pg_weight"], reward_r1=j["reward_r1"],
                     reward_r2=j["reward_r2"], k_retrieval=j["k_retrieval"],
                     k_generator=j["k_generator"], batch_size=j["batch"])
    diag = joint_train(labelled, unlabelled, enc, gen, disc, jc,
                       rounds=cfg["rounds"], seed=cfg["seed"] + 4)
    save_model(enc, out / "encoder.ckpt")
    save_model(gen, out / "generator.ckpt")
    save_model(disc, out / "discriminator.ckpt")
    if cfg["dump_pseudo"]:
        _dump_pseudo_pairs(gen, unlabelled, out / "pseudo_pairs.jsonl",
                           seed=cfg["seed"] + 5)
    acc = evaluate_accuracy(enc, instances)
    rows = [_standard_row("semisup-joint", acc=acc),
            {"tag": f"disc real={_sig6(diag['disc_real'][-1])} "
                    f"fake={_sig6(diag['disc_fake'][-1])}"}]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _dump_pseudo_pairs(generator, instances, path, seed=0):
    """Greedy pseudo sketches in the sketch-core JSONL format, flagged."""
    from .models import canvas_batch

    rng = np.random.Generator(np.random.PCG64(seed))
    photos = canvas_batch([i.photo for i in instances])
    with ad.no_grad():
        sketches, _, _ = generator.sample_sketches(photos, rng, greedy=True)
    with open(path, "w") as f:
        for inst, sk in zip(instances, sketches):
            rec = {"instance_id": inst.instance_id, "class_id": inst.class_id,
                   "strokes": [[[float(x), float(y)] for x, y in s.coords()]
                               for s in sk.strokes],
                   "noise_mask": [False] * sk.num_strokes,
                   "pseudo": True}
            f.write(json.dumps(rec) + "\n")


def _run_pretrain_ssl(cfg, out):
    from .pretext import PretextConfig, pretext_views, pretrain

    instances = dataset_from_config(cfg)
    d = cfg["dataset"]
    pc = PretextConfig(task=cfg["task"], height=d["height"], width=d["width"],
                       grid=cfg["grid"], channels=cfg["channels"],
                       latent=cfg["latent"], hidden=cfg["hidden"],
                       max_len=cfg["max_len"])
    views = pretext_views(instances, pc.height, pc.width, pc.max_len)
    model, losses = pretrain(views, pc, epochs=cfg["epochs"], lr=cfg["lr"],
                             batch_size=cfg["batch"], seed=cfg["seed"])
    save_checkpoint(out / "pretext.ckpt", model.params,
                    extra={"arch": model.arch, "pretext_config": vars(pc)})
    (out / "pretrain_losses.json").write_text(json.dumps([_sig6(l) for l in losses]))
    rows = [{"tag": f"pretrain-ssl:{cfg['task']}:final_loss={_sig6(losses[-1] if losses else float('nan'))}"}]
    _store_raw(out, rows)
    write_metrics(out, rows)


def load_pretext_model(path):
    from .pretext import PretextConfig, RasterToVector, VectorToRaster

    params, extra = load_checkpoint(path)
    pc = PretextConfig(**extra["pretext_config"])
    cls = RasterToVector if extra["arch"] == "raster_to_vector" else VectorToRaster
    model = cls(pc)
    model.load_state_arrays({k: v.data for k, v in params.items()})
    return model, pc


def _run_linear_eval(cfg, out):
    from .pretext import linear_eval

    instances = dataset_from_config(cfg)
    if not cfg.get("checkpoint"):
        raise ValueError("linear-eval needs config key 'checkpoint'")
    model, pc = load_pretext_model(cfg["checkpoint"])
    res = linear_eval(model, instances, pc, epochs=cfg["epochs"], lr=cfg["lr"],
                      seed=cfg["seed"], train_fraction=cfg["frac"])
    rows = [{"tag": "linear-eval", "acc@1": res["top1"], "acc@5": res["top5"]}]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _run_fscil(cfg, out):
    from .fscil import (FscilModel, evaluate_fscil, train_base,
                        train_weight_generator)

    instances = dataset_from_config(cfg)
    d = cfg["dataset"]
    n_base = cfg["base_classes"]
    base_ids = list(range(n_base))
    base = [i for i in instances if i.class_id < n_base]
    novel = [i for i in instances if i.class_id >= n_base]
    enc = RasterEncoder(height=d["height"], width=d["width"], seed=cfg["seed"])
    model = FscilModel(enc, base_ids, seed=cfg["seed"])
    train_base(model, base, epochs=cfg["base_epochs"], seed=cfg["seed"],
               use_consensus=cfg["use_consensus"])
    train_weight_generator(model, base, episodes=cfg["generator_episodes"],
                           ways=min(cfg["ways"], n_base - 1),
                           shots=cfg["shots"], seed=cfg["seed"],
                           use_consensus=cfg["use_consensus"])
    csv_path = out / "episodes.csv"
    rng = np.random.Generator(np.random.PCG64(cfg["seed"] + 9))
    from .fscil import EpisodeSpec, instances_by_class, run_episode
    by_class = instances_by_class(instances)
    pc_cache = model.photo_feature_cache(instances)
    sc_cache = model.sketch_feature_cache(instances)
    novel_ids = sorted({i.class_id for i in novel})
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "acc_both", "acc_base", "acc_novel"])
        sums = np.zeros(3)
        for ep in range(cfg["episodes"]):
            ways_now = min(cfg["ways"], len(novel_ids))
            chosen = list(rng.choice(novel_ids, size=ways_now, replace=False))
            spec = EpisodeSpec(base_ids, chosen, shots=cfg["shots"],
                               queries_per_class=cfg["queries_per_class"])
            m = run_episode(model, spec, by_class, pc_cache, sc_cache, rng)
            writer.writerow([ep, _sig6(m["acc_both"]), _sig6(m["acc_base"]),
                             _sig6(m["acc_novel"])])
            sums += [m["acc_both"], m["acc_base"], m["acc_novel"]]
    mean = sums / max(cfg["episodes"], 1)
    rows = [{"tag": f"fscil:{cfg['shots']}-shot:{cfg['ways']}-way",
             "acc@1": mean[0]},
            {"tag": f"fscil-base", "acc@1": mean[1]},
            {"tag": f"fscil-novel", "acc@1": mean[2]}]
    _store_raw(out, rows)
    write_metrics(out, rows)
    save_model(enc, out / "encoder.ckpt")
    save_model(model.gat, out / "gat.ckpt")


def _run_oracle(cfg, out):
    from .ranking import build_gallery, rank_of
    from .sketch import rasterize
    from .subset import brute_force_upper_limit

    instances = dataset_from_config(cfg)
    enc = encoder_from_config(cfg, instances, train=True)
    gallery = build_gallery(enc, instances)
    limit = cfg["limit"] or len(instances)
    results = {}
    better = 0
    for inst in instances[:limit]:
        best_rank, best_mask = brute_force_upper_limit(
            inst.sketch, gallery, enc, inst.instance_id, max_k=cfg["max_k"])
        with ad.no_grad():
            emb = enc.embed(rasterize(inst.sketch, enc.height,
                                      enc.width).intensities[None]).data[0]
        full_rank, _ = rank_of(emb, gallery, inst.instance_id)
        better += best_rank < full_rank
        results[str(inst.instance_id)] = {
            "best_rank": best_rank, "full_rank": full_rank,
            "best_mask": best_mask.tolist()}
    (out / "oracle.json").write_text(json.dumps(results, indent=0))
    rows = [{"tag": f"oracle:improved={better}/{limit}"}]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _run_augment(cfg, out):
    from .subset import augment_subsets

    instances = dataset_from_config(cfg)
    if not cfg.get("selector_checkpoint"):
        raise ValueError("augment needs config key 'selector_checkpoint'")
    selector = load_model(cfg["selector_checkpoint"])
    masks = {str(inst.instance_id):
             [m.astype(bool).tolist() for m in
              augment_subsets(inst.sketch, selector, cfg["n"], seed=cfg["seed"])]
             for inst in instances}
    (out / "augmented_masks.json").write_text(json.dumps(masks, indent=0))
    rows = [{"tag": f"augment:n={cfg['n']}"}]
    _store_raw(out, rows)
    write_metrics(out, rows)


def _run_eval(cfg, out):
    from .otf import OtfPolicy, evaluate_policy
    from .ranking import build_gallery

    instances = dataset_from_config(cfg)
    if not cfg.get("encoder_checkpoint"):
        raise ValueError("eval needs config key 'encoder_checkpoint'")
    enc = load_model(cfg["encoder_checkpoint"])
    acc = evaluate_accuracy(enc, instances)
    gallery = build_gallery(enc, instances)
    policy = OtfPolicy(enc, seed=cfg["seed"])
    otf = evaluate_policy(policy, instances, gallery, cfg["T"])
    rows = [_standard_row(cfg["tag"], acc=acc, otf=otf)]
    _store_raw(out, rows)
    write_metrics(out, rows)
