"""Noise-tolerant retrieval via stroke-subset selection.

The selector is a per-stroke select/ignore policy over the hierarchical
stroke encoder, trained with actor-critic PPO against a frozen retrieval
model: the reward mixes inverse rank with a negative triplet loss on the
rasterized subset.  Each training sample unrolls the subset MDP T times,
always restarting from the complete sketch.  A brute-force enumerator over
all non-empty subsets provides the attainable upper limit.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import RasterEncoder, StrokeHierEncoder
from .optim import Adam
from .ranking import Gallery, build_gallery, rank_of, triplet_loss
from .sketch import VectorSketch, stroke_pixel_masks


@dataclass
class SubsetMDPConfig:
    episode_length: int = 5      # T re-selections per sample
    omega1: float = 1.0          # inverse-rank reward weight
    omega2: float = 1.0          # negative-triplet reward weight
    clip_epsilon: float = 0.2
    c1: float = 0.5              # value-error coefficient
    c2: float = 0.01             # entropy-bonus coefficient
    old_refresh_every: int = 20  # iterations between old-policy refreshes
    replay_capacity: int = 512
    batch_size: int = 16
    margin: float = 0.2

    def __post_init__(self):
        for name in ("omega1", "omega2", "c1", "c2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _sample_mask(probs: np.ndarray, rng) -> np.ndarray:
    return rng.random(len(probs)) < probs[:, 0]


def select_subset(sketch: VectorSketch, selector: StrokeHierEncoder,
                  mode: str = "sample", rng=None, seed=None,
                  probs: np.ndarray | None = None):
    """(mask, per-stroke log-probs of the taken actions).

    Sampling draws each stroke's action from its select/ignore distribution;
    an all-ignore draw is resampled (up to 10 tries) and finally forced to
    keep the highest-probability stroke.  argmax mode is deterministic.
    """
    if probs is None:
        with ad.no_grad():
            _, probs_t = selector.forward(sketch)
        probs = probs_t.data
    if mode == "argmax":
        mask = probs[:, 0] >= probs[:, 1]
        if not mask.any():
            mask[np.argmax(probs[:, 0])] = True
    elif mode == "sample":
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(seed))
        mask = _sample_mask(probs, rng)
        tries = 0
        while not mask.any() and tries < 10:
            mask = _sample_mask(probs, rng)
            tries += 1
        if not mask.any():
            mask[np.argmax(probs[:, 0])] = True
    else:
        raise ValueError(f"unknown mode {mode!r}")
    chosen = np.where(mask, probs[:, 0], probs[:, 1])
    return mask, np.log(np.maximum(chosen, 1e-300))


def subset_reward(mask, sketch: VectorSketch, gallery: Gallery,
                  retrieval_model: RasterEncoder, true_id: int,
                  negative_id: int, config: SubsetMDPConfig | None = None,
                  pixel_masks: np.ndarray | None = None) -> float:
    """omega1 * (1/rank) + omega2 * (-triplet) of the rasterized subset."""
    config = config or SubsetMDPConfig()
    emb = _subset_embedding(mask, sketch, retrieval_model, pixel_masks)
    rank, _ = rank_of(emb, gallery, true_id)
    pos = gallery.embeddings[gallery.row_of(true_id)]
    neg = gallery.embeddings[gallery.row_of(negative_id)]
    trip = triplet_loss(emb, pos, neg, config.margin)
    return config.omega1 * (1.0 / rank) + config.omega2 * (-trip)


def _subset_canvas(mask, sketch, model, pixel_masks=None) -> np.ndarray:
    if pixel_masks is None:
        pixel_masks = stroke_pixel_masks(sketch, model.height, model.width)
    return pixel_masks[np.asarray(mask, dtype=bool)].any(axis=0).astype(np.float64)


def _subset_embedding(mask, sketch, model, pixel_masks=None) -> np.ndarray:
    canvas = _subset_canvas(mask, sketch, model, pixel_masks)
    with ad.no_grad():
        return model.embed(canvas[None]).data[0]


@dataclass
class SubsetEpisode:
    """T independent re-selections of one sketch plus their rewards."""

    instance_id: int
    masks: np.ndarray        # (T, K) bool
    log_probs_old: np.ndarray  # (T, K)
    rewards: np.ndarray      # (T,)


def collect_episode(inst, selector: StrokeHierEncoder, gallery: Gallery,
                    retrieval_model: RasterEncoder, config: SubsetMDPConfig,
                    rng, pixel_masks=None) -> SubsetEpisode:
    sketch = inst.sketch
    with ad.no_grad():
        _, probs_t = selector.forward(sketch)
    probs = probs_t.data
    if pixel_masks is None:
        pixel_masks = stroke_pixel_masks(sketch, retrieval_model.height,
                                         retrieval_model.width)
    ids = gallery.instance_ids
    masks, lps, rewards = [], [], []
    for _ in range(config.episode_length):
        mask, lp = select_subset(sketch, selector, mode="sample", rng=rng, probs=probs)
        j = int(rng.integers(0, len(ids) - 1))
        if int(ids[j]) == inst.instance_id:
            j = len(ids) - 1
        neg = int(ids[j])
        r = subset_reward(mask, sketch, gallery, retrieval_model,
                          inst.instance_id, neg, config, pixel_masks)
        masks.append(mask)
        lps.append(lp)
        rewards.append(r)
    return SubsetEpisode(inst.instance_id, np.array(masks), np.array(lps),
                         np.array(rewards))


def ac_ppo_update(episodes, sketch_of, selector: StrokeHierEncoder,
                  config: SubsetMDPConfig, optimizer: Adam) -> dict:
    """Actor-critic PPO step over a batch of subset episodes.

    Per draw: the actor term averages min(r_i A, clip(r_i) A) over strokes
    with advantage A = R - V(S) (the critic as a variance-reducing baseline),
    the critic itself is pulled toward R, and the entropy bonus rewards
    exploratory select/ignore distributions; the loss accumulates over the T
    unrolls of each sample.
    """
    total = None
    count = 0
    for ep in episodes:
        sketch = sketch_of(ep.instance_id)
        fused, probs = selector.forward(sketch)
        pooled = ad.mean(fused, axis=0, keepdims=True)
        value = ad.reshape(pooled @ selector.params["value_w"]
                           + selector.params["value_b"], ())
        log_probs = ad.log(ad.add(probs, 1e-300))
        entropy = ad.mul(ad.mean(ad.sum_(ad.mul(probs, log_probs), axis=1)), -1.0)
        for t in range(len(ep.rewards)):
            mask = ep.masks[t]
            r = float(ep.rewards[t])
            adv = r - float(value.data)  # baseline detached in the actor term
            sel = np.stack([mask, ~mask], axis=1).astype(np.float64)
            lp_new = ad.sum_(ad.mul(log_probs, sel), axis=1)
            ratio = ad.exp(ad.add(lp_new, -ep.log_probs_old[t]))
            unclipped = ad.mul(ratio, adv)
            clipped = ad.mul(ad.clip(ratio, 1.0 - config.clip_epsilon,
                                     1.0 + config.clip_epsilon), adv)
            actor = ad.mean(ad.minimum(unclipped, clipped))
            verr = ad.mul(ad.pow_const(ad.add(value, -r), 2.0), config.c1)
            draw_loss = ad.add(ad.add(ad.mul(actor, -1.0), verr),
                               ad.mul(entropy, -config.c2))
            total = draw_loss if total is None else ad.add(total, draw_loss)
            count += 1
    loss = ad.mul(total, 1.0 / count)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"loss": loss.item()}


def train_subset_selector(instances, retrieval_model: RasterEncoder,
                          config: SubsetMDPConfig | None = None,
                          iterations: int = 150, lr: float = 3e-3, seed: int = 0,
                          selector: StrokeHierEncoder | None = None,
                          hidden: int = 64, log=None) -> StrokeHierEncoder:
    """PPO training of the selector against a frozen retrieval model.

    Episodes are collected under the old policy into a FIFO replay buffer;
    the old policy is refreshed from the current one every
    `config.old_refresh_every` iterations.
    """
    config = config or SubsetMDPConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    if selector is None:
        selector = StrokeHierEncoder(hidden=hidden, seed=seed)
    old = selector.clone()
    gallery = build_gallery(retrieval_model, instances)
    by_id = {inst.instance_id: inst for inst in instances}
    px_cache = {inst.instance_id: stroke_pixel_masks(
        inst.sketch, retrieval_model.height, retrieval_model.width)
        for inst in instances}
    buffer = deque(maxlen=config.replay_capacity)
    opt = Adam(selector.params, lr=lr)
    n = len(instances)
    for it in range(iterations):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        for i in idx:
            inst = instances[i]
            buffer.append(collect_episode(inst, old, gallery, retrieval_model,
                                          config, rng, px_cache[inst.instance_id]))
        picks = rng.choice(len(buffer), size=min(config.batch_size, len(buffer)),
                           replace=False)
        diag = ac_ppo_update([buffer[p] for p in picks],
                             lambda iid: by_id[iid].sketch, selector, config, opt)
        if (it + 1) % config.old_refresh_every == 0:
            old = selector.clone()
        if log:
            log(it, diag)
    return selector


def brute_force_upper_limit(sketch: VectorSketch, gallery: Gallery,
                            retrieval_model: RasterEncoder, true_id: int,
                            max_k: int = 16):
    """Exhaustive best rank over all non-empty stroke subsets.

    Returns (best_rank, best_mask) where the mask is the lexicographically
    smallest one achieving the best rank.  Guarded to K <= max_k (16); larger
    sketches should use sampled selection instead.
    """
    k = sketch.num_strokes
    if k < 1:
        raise ValueError("sketch has no strokes")
    if k > max_k or max_k > 16:
        raise ValueError(
            f"K={k} exceeds the brute-force guard ({min(max_k, 16)}); "
            "sample subsets with the selector instead")
    px = stroke_pixel_masks(sketch, retrieval_model.height, retrieval_model.width)
    # ascending integers enumerate boolean tuples (MSB first) in lexicographic
    # order with False < True; zero (all-ignore) is skipped
    bits = ((np.arange(1, 2 ** k)[:, None] >> np.arange(k - 1, -1, -1)) & 1).astype(bool)
    canvases = np.einsum("mk,khw->mhw", bits.astype(np.float64),
                         px.astype(np.float64))
    canvases = (canvases > 0).astype(np.float64)
    best_rank, best_mask = None, None
    with ad.no_grad():
        for start in range(0, len(bits), 256):
            emb = retrieval_model.embed(canvases[start:start + 256]).data
            for j, e in enumerate(emb):
                rank, _ = rank_of(e, gallery, true_id)
                if best_rank is None or rank < best_rank:
                    best_rank, best_mask = rank, bits[start + j]
    return int(best_rank), best_mask.astype(bool)


def retrievability_score(partial_sketch: VectorSketch,
                         selector: StrokeHierEncoder) -> float:
    """Critic value V(S) of a (partial) sketch; higher means more retrievable."""
    if partial_sketch.num_strokes < 1:
        raise ValueError("retrievability needs at least one stroke")
    with ad.no_grad():
        return float(selector.value(partial_sketch).data)


def augment_subsets(sketch: VectorSketch, selector: StrokeHierEncoder,
                    n: int, seed: int = 0) -> list[np.ndarray]:
    """n sampled subset masks (duplicates permitted, none empty)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    with ad.no_grad():
        _, probs_t = selector.forward(sketch)
    probs = probs_t.data
    return [select_subset(sketch, selector, mode="sample", rng=rng, probs=probs)[0]
            for _ in range(n)]


def noise_benchmark(seed: int = 77, n_classes: int = 32, n_instances: int = 8,
                    noise_strokes: int = 2, triplet_epochs: int = 30,
                    selector_phases: int = 3, iterations_per_phase: int = 200,
                    lr: float = 3e-3, n_oracle: int = 0, log=None) -> dict:
    """End-to-end noisy-query benchmark for the subset selector.

    Protocol: the retrieval model is the standard pretrained fixture (triplet
    training on the instances' clean outline strokes); the injected scribbles
    model query-time user noise that the frozen model never adapted to.  The
    noise-blind baseline feeds the raw noisy sketches; the selector pipeline
    feeds its argmax-cleaned subsets through the same frozen model.  The
    selector trains only on freshly re-drawn noise, never on the evaluation
    draws or the noise_mask ground truth.
    """
    from .models import RasterEncoder
    from .ranking import evaluate_accuracy, train_triplet
    from .synthetic import gen_synthetic_dataset, with_fresh_noise

    ds = gen_synthetic_dataset(seed, n_classes, n_instances, noise_strokes)
    enc = RasterEncoder(seed=seed)
    train_triplet(enc, ds, margin=0.3, epochs=triplet_epochs, seed=seed,
                  sketch_of=lambda i: i.clean_sketch())
    report = {
        "baseline": evaluate_accuracy(enc, ds),
        "clean_ceiling": evaluate_accuracy(enc, ds, sketch_of=lambda i: i.clean_sketch()),
    }
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    selector = None
    for phase in range(selector_phases):
        renoised = [with_fresh_noise(i, noise_strokes, rng) for i in ds]
        selector = train_subset_selector(renoised, enc, SubsetMDPConfig(),
                                         iterations=iterations_per_phase,
                                         lr=lr, seed=seed + phase, selector=selector,
                                         log=log)
    masks = apply_selector(ds, selector)
    report["cleaned"] = evaluate_accuracy(
        enc, ds, sketch_of=lambda i: i.sketch.select(masks[i.instance_id]))
    noise_kept = [masks[i.instance_id][np.asarray(i.noise_mask)].mean()
                  for i in ds if any(i.noise_mask)]
    true_kept = [masks[i.instance_id][~np.asarray(i.noise_mask)].mean() for i in ds]
    report["noise_kept_frac"] = float(np.mean(noise_kept)) if noise_kept else 0.0
    report["true_kept_frac"] = float(np.mean(true_kept))
    if n_oracle:
        gallery = build_gallery(enc, ds)
        ranks = [brute_force_upper_limit(i.sketch, gallery, enc, i.instance_id)[0]
                 for i in ds[:n_oracle]]
        report["upper_limit_acc1"] = float(np.mean([r == 1 for r in ranks]))
    report["model"] = enc
    report["selector"] = selector
    report["masks"] = masks
    return report


def apply_selector(instances, selector: StrokeHierEncoder) -> dict:
    """Argmax cleaning masks keyed by instance id."""
    return {inst.instance_id:
            select_subset(inst.sketch, selector, mode="argmax")[0]
            for inst in instances}


def alternating_clean_train(instances, rounds: int = 2, encoder_kw: dict | None = None,
                            triplet_kw: dict | None = None,
                            selector_kw: dict | None = None, seed: int = 0,
                            log=None):
    """Stage-wise alternation: triplet training on selector-cleaned sketches,
    then selector PPO training against the refreshed frozen model.

    Round one trains on the raw sketches (no selector yet) and fits the first
    selector; later rounds retrain the retrieval model on cleaned sketches.
    Returns (retrieval_model, selector, per-round metrics).
    """
    from .ranking import evaluate_accuracy, train_triplet

    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    encoder_kw = dict(encoder_kw or {})
    triplet_kw = dict(triplet_kw or {})
    selector_kw = dict(selector_kw or {})
    selector = None
    model = None
    history = []
    for rnd in range(rounds):
        if selector is None:
            sketch_of = lambda inst: inst.sketch
        else:
            masks = apply_selector(instances, selector)
            sketch_of = lambda inst: inst.sketch.select(masks[inst.instance_id])
        model = RasterEncoder(seed=seed + rnd, **encoder_kw)
        train_triplet(model, instances, seed=seed + rnd, sketch_of=sketch_of,
                      **triplet_kw)
        selector = train_subset_selector(instances, model, seed=seed + rnd,
                                         **selector_kw)
        metrics = evaluate_accuracy(model, instances)
        cleaned = apply_selector(instances, selector)
        metrics_clean = evaluate_accuracy(
            model, instances,
            sketch_of=lambda inst: inst.sketch.select(cleaned[inst.instance_id]))
        history.append({"round": rnd, "noisy": metrics, "cleaned": metrics_clean})
        if log:
            log(rnd, history[-1])
    return model, selector, history
