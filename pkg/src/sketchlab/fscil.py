"""Sketch-supported few-shot class-incremental classification.

A shared raster backbone feeds a cosine classifier.  Base training mixes
photo and sketch batches through gradient consensus (sign-agreeing gradient
components sum, conflicting ones zero out).  Novel classes enter through
support-sketch prototypes refined jointly with the base weights by a graph
attention layer; episodic pseudo-incremental training fits that generator by
synthetically dropping base classes.  Inference uses sketch exemplars only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import CosineClassifier, GATLayer, RasterEncoder, canvas_batch
from .optim import Adam
from .sketch import rasterize


def gradient_consensus(grad_photo: np.ndarray, grad_sketch: np.ndarray) -> np.ndarray:
    """Elementwise sum where the signs agree, zero elsewhere.

    A zero component has no sign and conflicts with any nonzero component, so
    the result there is zero (the conservative reading of sign agreement).
    """
    gp = np.asarray(grad_photo, dtype=np.float64)
    gs = np.asarray(grad_sketch, dtype=np.float64)
    if gp.shape != gs.shape:
        raise ValueError(f"gradient shapes differ: {gp.shape} vs {gs.shape}")
    agree = np.sign(gp) == np.sign(gs)
    return np.where(agree, gp + gs, 0.0)


def consensus_grad_dicts(grads_photo: dict, grads_sketch: dict) -> dict:
    out = {}
    for k in grads_photo:
        gp, gs = grads_photo[k], grads_sketch[k]
        if gp is None or gs is None:
            out[k] = None
        else:
            out[k] = gradient_consensus(gp, gs)
    return out


@dataclass
class EpisodeSpec:
    """One incremental episode: which classes play base vs novel, shot count,
    and the query size per class."""

    base_classes: list
    novel_classes: list
    shots: int = 5
    queries_per_class: int = 15

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes must be disjoint")


class FscilModel:
    """Backbone + base cosine classifier + optional GAT weight generator."""

    def __init__(self, encoder: RasterEncoder, base_class_ids, gat: GATLayer | None = None,
                 seed: int = 0):
        self.encoder = encoder
        self.base_class_ids = list(base_class_ids)
        self.classifier = CosineClassifier(len(self.base_class_ids),
                                           dim=encoder.embed_dim, seed=seed)
        self.gat = gat
        self._row_of = {c: i for i, c in enumerate(self.base_class_ids)}

    def base_weight(self, class_id) -> np.ndarray:
        return self.classifier.params["w"].data[self._row_of[class_id]]

    def photo_feature_cache(self, instances) -> dict:
        return self._cache(instances, photo=True)

    def sketch_feature_cache(self, instances) -> dict:
        return self._cache(instances, photo=False)

    def _cache(self, instances, photo: bool) -> dict:
        canv = canvas_batch([
            inst.photo if photo else rasterize(inst.sketch, self.encoder.height,
                                               self.encoder.width)
            for inst in instances])
        with ad.no_grad():
            feats = self.encoder.embed(canv).data
        return {inst.instance_id: feats[i] for i, inst in enumerate(instances)}


def train_base(model: FscilModel, instances, epochs=20, batch_size=8, lr=2e-3,
               seed=0, use_consensus=True, log=None) -> list:
    """Cross-modal base training of backbone + cosine classifier.

    Each step draws a photo batch and a sketch batch of equal size, computes
    the two cross-entropy losses separately, and applies the consensus-merged
    gradient (or the plain sum when consensus is disabled).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    label_row = {c: i for i, c in enumerate(model.base_class_ids)}
    insts = [i for i in instances if i.class_id in label_row]
    photos = canvas_batch([i.photo for i in insts])
    sketches = canvas_batch([rasterize(i.sketch, model.encoder.height,
                                       model.encoder.width) for i in insts])
    onehot = np.eye(len(label_row))[[label_row[i.class_id] for i in insts]]
    params = dict(model.encoder.params)
    params.update({"clf_" + k: v for k, v in model.classifier.params.items()})
    opt = Adam(params, lr=lr)
    n = len(insts)
    losses = []

    def branch_loss(canvases, idx):
        feats = model.encoder.embed(canvases[idx])
        logits = model.classifier.logits(feats)
        return ad.cross_entropy(logits, onehot[idx])

    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss_p = branch_loss(photos, idx)
            opt.zero_grad()
            loss_p.backward()
            gp = {k: (None if p.grad is None else p.grad.copy())
                  for k, p in params.items()}
            loss_s = branch_loss(sketches, idx)
            opt.zero_grad()
            loss_s.backward()
            gs = {k: (None if p.grad is None else p.grad.copy())
                  for k, p in params.items()}
            if use_consensus:
                merged = consensus_grad_dicts(gp, gs)
            else:
                merged = {k: (None if gp[k] is None else gp[k] + gs[k]) for k in gp}
            for k, p in params.items():
                p.grad = merged[k]
            opt.step()
            total += (loss_p.item() + loss_s.item()) * len(idx)
        losses.append(total / (2 * n))
        if log:
            log(epoch, losses[-1])
    return losses


def novel_prototypes(support_features: dict) -> tuple[np.ndarray, list]:
    """Row-normalised mean features per novel class.

    `support_features` maps class_id -> (k, d) feature rows; classes keep the
    dict's insertion order.
    """
    rows, order = [], []
    for class_id, feats in support_features.items():
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) == 0:
            raise ValueError(f"class {class_id} needs a (k, d) support block")
        mean = feats.mean(axis=0)
        rows.append(mean / max(np.linalg.norm(mean), 1e-12))
        order.append(class_id)
    return np.stack(rows), order


def generate_weights(w_base: np.ndarray, w_novel: np.ndarray,
                     gat: GATLayer | None):
    """Concatenate base and novel weight rows and refine them with the GAT.

    With gat=None this is the naive-concatenation baseline (the documented
    ablation control).  Returns a Tensor when refinement needs gradients.
    """
    w_in = np.concatenate([w_base, w_novel], axis=0)
    if gat is None:
        return Tensor(w_in)
    return gat.refine(Tensor(w_in))


def fscil_losses(query_features: np.ndarray, query_rows: np.ndarray,
                 w_new: Tensor, base_rows_in_new: list,
                 teacher_logits: np.ndarray):
    """(L_cls, L_distil) over a query batch.

    L_cls is cross-entropy of the new cosine classifier against hard labels
    (rows into w_new).  L_distil matches the new classifier's base-class
    logits (selected by `base_rows_in_new`) against the frozen base
    classifier's soft outputs.
    """
    f_hat = ad.l2_normalize(Tensor(query_features), axis=1)
    w_hat = ad.l2_normalize(w_new, axis=1)
    logits = f_hat @ ad.transpose(w_hat)
    n_classes = w_new.shape[0]
    cls = ad.cross_entropy(logits, np.eye(n_classes)[query_rows])
    t_shift = teacher_logits - teacher_logits.max(axis=1, keepdims=True)
    t_probs = np.exp(t_shift) / np.exp(t_shift).sum(axis=1, keepdims=True)
    distil = ad.cross_entropy(logits[:, base_rows_in_new], t_probs)
    return cls, distil


def run_episode(model: FscilModel, spec: EpisodeSpec, instances_by_class: dict,
                photo_cache: dict, sketch_cache: dict, rng,
                mode: str = "eval", gat="model",
                collect_loss: bool = False):
    """One incremental episode; returns the three accuracies (and the loss
    tensors when training the weight generator).

    Support exemplars are sketches; in pseudo_train mode the caller runs the
    episode twice (sketch support, then photo support) and merges the weight
    generator's gradients by sign consensus.
    """
    if mode not in ("eval", "pseudo_train", "pseudo_train_photo"):
        raise ValueError(f"unknown mode {mode!r}")
    use_photo_support = mode == "pseudo_train_photo"
    if isinstance(gat, str) and gat == "model":
        gat = model.gat

    support = {}
    queries = []
    q_labels = []
    for c in spec.novel_classes:
        pool = instances_by_class[c]
        if len(pool) < spec.shots + 1:
            raise ValueError(f"class {c} lacks data for {spec.shots}-shot episodes")
        picks = rng.choice(len(pool), size=min(len(pool), spec.shots +
                                               spec.queries_per_class), replace=False)
        sup, qry = picks[:spec.shots], picks[spec.shots:]
        cache = photo_cache if use_photo_support else sketch_cache
        support[c] = np.stack([cache[pool[i].instance_id] for i in sup])
        queries.extend(photo_cache[pool[i].instance_id] for i in qry)
        q_labels.extend([c] * len(qry))
    for c in spec.base_classes:
        pool = instances_by_class[c]
        picks = rng.choice(len(pool), size=min(len(pool), spec.queries_per_class),
                           replace=False)
        queries.extend(photo_cache[pool[i].instance_id] for i in picks)
        q_labels.extend([c] * len(picks))

    w_novel, novel_order = novel_prototypes(support)
    w_base = np.stack([model.base_weight(c) for c in spec.base_classes]) \
        if spec.base_classes else np.zeros((0, model.encoder.embed_dim))
    w_new = generate_weights(w_base, w_novel, gat)

    class_order = list(spec.base_classes) + list(novel_order)
    row_of = {c: i for i, c in enumerate(class_order)}
    query_feats = np.stack(queries)
    query_rows = np.array([row_of[c] for c in q_labels])

    with ad.no_grad():
        w_hat = ad.l2_normalize(w_new, axis=1).data
    f_hat = query_feats / np.maximum(
        np.linalg.norm(query_feats, axis=1, keepdims=True), 1e-12)
    pred_rows = np.argmax(f_hat @ w_hat.T, axis=1)

    is_novel = np.array([c in set(spec.novel_classes) for c in q_labels])
    correct = pred_rows == query_rows
    metrics = {
        "acc_both": float(correct.mean()),
        "acc_novel": float(correct[is_novel].mean()) if is_novel.any() else float("nan"),
        "acc_base": float(correct[~is_novel].mean()) if (~is_novel).any() else float("nan"),
    }
    if not collect_loss:
        return metrics
    base_rows_in_new = [row_of[c] for c in class_order
                        if c in model._row_of]
    teacher_cols = [model._row_of[c] for c in class_order if c in model._row_of]
    with ad.no_grad():
        t_logits_full = model.classifier.logits(Tensor(query_feats)).data
    teacher_logits = t_logits_full[:, teacher_cols]
    cls, distil = fscil_losses(query_feats, query_rows, w_new,
                               base_rows_in_new, teacher_logits)
    return metrics, ad.add(cls, distil)


def train_weight_generator(model: FscilModel, instances, episodes=60,
                           ways=3, shots=5, queries_per_class=10, lr=2e-3,
                           seed=0, use_consensus=True, log=None) -> GATLayer:
    """Episodic pseudo-incremental fitting of the GAT weight generator.

    Every episode synthetically drops `ways` base classes, rebuilds their
    weights from support exemplars, and optimises L_cls + L_distil on query
    photos; sketch- and photo-support gradients merge by sign consensus.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    gat = model.gat or GATLayer(dim=model.encoder.embed_dim, seed=seed)
    model.gat = gat
    by_class = instances_by_class(instances, model.base_class_ids)
    photo_cache = model.photo_feature_cache(instances)
    sketch_cache = model.sketch_feature_cache(instances)
    opt = Adam(gat.params, lr=lr)
    history = []
    for ep in range(episodes):
        novel = list(rng.choice(model.base_class_ids, size=ways, replace=False))
        base = [c for c in model.base_class_ids if c not in novel]
        spec = EpisodeSpec(base, novel, shots=shots,
                           queries_per_class=queries_per_class)
        ep_rng_state = rng.bit_generator.state
        _, loss_s = run_episode(model, spec, by_class, photo_cache, sketch_cache,
                                rng, mode="pseudo_train", collect_loss=True)
        opt.zero_grad()
        loss_s.backward()
        gs = {k: (None if p.grad is None else p.grad.copy())
              for k, p in gat.params.items()}
        rng.bit_generator.state = ep_rng_state  # same draw for the photo pass
        _, loss_p = run_episode(model, spec, by_class, photo_cache, sketch_cache,
                                rng, mode="pseudo_train_photo", collect_loss=True)
        opt.zero_grad()
        loss_p.backward()
        gp = {k: (None if p.grad is None else p.grad.copy())
              for k, p in gat.params.items()}
        merged = consensus_grad_dicts(gp, gs) if use_consensus else \
            {k: (None if gp[k] is None else gp[k] + gs[k]) for k in gp}
        for k, p in gat.params.items():
            p.grad = merged[k]
        opt.step()
        history.append(loss_s.item())
        if log:
            log(ep, history[-1])
    return gat


def instances_by_class(instances, restrict_to=None) -> dict:
    out = {}
    for inst in instances:
        if restrict_to is not None and inst.class_id not in restrict_to:
            continue
        out.setdefault(inst.class_id, []).append(inst)
    return out


def evaluate_fscil(model: FscilModel, base_instances, novel_instances,
                   episodes=600, ways=5, shots=5, queries_per_class=15,
                   seed=0, gat="model") -> dict:
    """Average episode accuracies over the protocol's episode count.

    Sketches are the only support exemplars.  `gat` may be "model" (use the
    trained generator), None (naive concatenation), or a GATLayer.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    by_class = instances_by_class(list(base_instances) + list(novel_instances))
    all_insts = list(base_instances) + list(novel_instances)
    photo_cache = model.photo_feature_cache(all_insts)
    sketch_cache = model.sketch_feature_cache(all_insts)
    novel_ids = sorted({i.class_id for i in novel_instances})
    layer = model.gat if gat == "model" else gat
    accs = {"acc_both": [], "acc_novel": [], "acc_base": []}
    for _ in range(episodes):
        ways_now = min(ways, len(novel_ids))
        novel = list(rng.choice(novel_ids, size=ways_now, replace=False))
        spec = EpisodeSpec(model.base_class_ids, novel, shots=shots,
                           queries_per_class=queries_per_class)
        m = run_episode(model, spec, by_class, photo_cache, sketch_cache, rng,
                        mode="eval", gat=layer)
        for k in accs:
            accs[k].append(m[k])
    return {k: float(np.nanmean(v)) for k, v in accs.items()}
