"""Gallery ranking, triplet loss, and the evaluation metrics.

Distances are Euclidean on unit-norm embeddings (monotone with cosine).
Ties break deterministically: the lower gallery index ranks first, and the
true match is placed pessimistically among its own ties.  Ranking percentile
is RP = (M - rank) / (M - 1), reported x100.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Gallery:
    """M candidate embeddings with instance identities."""

    embeddings: np.ndarray
    instance_ids: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.instance_ids):
            raise ValueError("embeddings must be M x D with one id per row")
        if len(set(self.instance_ids.tolist())) != len(self.instance_ids):
            raise ValueError("instance ids must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("gallery rows must be unit-norm within 1e-6")
        self._id_to_row = {int(i): r for r, i in enumerate(self.instance_ids)}

    def __len__(self):
        return len(self.instance_ids)

    def row_of(self, instance_id: int) -> int:
        if int(instance_id) not in self._id_to_row:
            raise KeyError(f"instance {instance_id} not in gallery")
        return self._id_to_row[int(instance_id)]


def distances_to(query: np.ndarray, gallery: Gallery) -> np.ndarray:
    return np.linalg.norm(gallery.embeddings - np.asarray(query)[None, :], axis=1)


def rank_list(query: np.ndarray, gallery: Gallery) -> np.ndarray:
    """Permutation of gallery rows by ascending distance, ties by lower index."""
    d = distances_to(query, gallery)
    return np.lexsort((np.arange(len(d)), d))


def rank_of(query: np.ndarray, gallery: Gallery, true_id: int):
    """(1-based rank of the true item, full rank list).

    rank = 1 + #closer + #ties ordered before the true item (lower index
    first), which places the true match pessimistically among its ties.
    """
    row = gallery.row_of(true_id)
    d = distances_to(query, gallery)
    dt = d[row]
    closer = int(np.sum(d < dt))
    tied_before = int(np.sum((d == dt) & (np.arange(len(d)) < row)))
    return closer + tied_before + 1, rank_list(query, gallery)


def acc_at_q(ranks, q: int) -> float:
    """Fraction of ranks <= q."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("acc_at_q needs at least one rank")
    if q < 1:
        raise ValueError("q must be >= 1")
    return float(np.mean(ranks <= q))


def ranking_percentile(rank: int, gallery_size: int) -> float:
    """(M - rank) / (M - 1) in [0, 1]: rank 1 -> 1.0, rank M -> 0.0."""
    if gallery_size < 2:
        return 1.0
    return (gallery_size - rank) / (gallery_size - 1.0)


def kendall_tau_norm(a, b) -> float:
    """Normalised Kendall-Tau distance between two rank lists.

    Counts pairwise order disagreements divided by n(n-1)/2; 0 for identical
    lists, 1 for full reversal.
    """
    a = list(np.asarray(a).tolist())
    b = list(np.asarray(b).tolist())
    n = len(a)
    if n < 2 or len(b) != n:
        raise ValueError("rank lists must share a length >= 2")
    if set(a) != set(b) or len(set(a)) != n:
        raise ValueError("rank lists must cover the same index set")
    pos_b = {v: i for i, v in enumerate(b)}
    seq = [pos_b[v] for v in a]  # b-positions in a's order; inversions = discordant pairs
    discordant = _count_inversions(seq)
    return discordant / (n * (n - 1) / 2.0)


def _count_inversions(seq) -> int:
    if len(seq) < 2:
        return 0
    mid = len(seq) // 2
    left, right = seq[:mid], seq[mid:]
    inv = _count_inversions(left) + _count_inversions(right)
    merged = []
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i]); i += 1
        else:
            merged.append(right[j]); j += 1
            inv += len(left) - i
    seq[:] = merged + left[i:] + right[j:]
    return inv


@dataclass
class EpisodeCurve:
    """Per-step ranking percentile (in [0,1]) and inverse rank over an episode."""

    percentiles: list = field(default_factory=list)
    inverse_ranks: list = field(default_factory=list)

    def append(self, rank: int, gallery_size: int):
        self.percentiles.append(ranking_percentile(rank, gallery_size))
        self.inverse_ranks.append(1.0 / rank)


def episode_metrics(curve: EpisodeCurve):
    """(m@A, m@B): mean area under the RP and 1/rank curves (RP scale x100)."""
    if not curve.percentiles:
        raise ValueError("empty episode curve")
    return (100.0 * float(np.mean(curve.percentiles)),
            float(np.mean(curve.inverse_ranks)))


def stroke_backlash(percentiles) -> float:
    """Mean magnitude of per-step ranking-percentile drops, RP in [0,1]."""
    rp = np.asarray(percentiles, dtype=np.float64)
    if len(rp) < 2:
        raise ValueError("need at least two steps")
    drops = np.minimum(np.diff(rp), 0.0)
    return float(np.abs(drops).sum() / (len(rp) - 1))


# -- triplet loss and base training ----------------------------------------------

def triplet_loss(anchor, positive, negative, margin: float):
    """max(0, margin + d(a,p) - d(a,n)) with Euclidean distances.

    Accepts numpy arrays (returns float) or Tensors (returns a Tensor for
    training graphs); batched rows average over the batch.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    if isinstance(anchor, Tensor) or isinstance(positive, Tensor) or isinstance(negative, Tensor):
        a = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
        p = positive if isinstance(positive, Tensor) else Tensor(positive)
        n = negative if isinstance(negative, Tensor) else Tensor(negative)
        d_pos = _row_norm(ad.add(a, ad.mul(p, -1.0)))
        d_neg = _row_norm(ad.add(a, ad.mul(n, -1.0)))
        hinge = ad.relu(ad.add(ad.add(d_pos, ad.mul(d_neg, -1.0)), margin))
        return ad.mean(hinge)
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (anchor, positive, negative))
    d_pos = np.linalg.norm(a - p, axis=-1)
    d_neg = np.linalg.norm(a - n, axis=-1)
    return float(np.mean(np.maximum(0.0, margin + d_pos - d_neg)))


def _row_norm(t: Tensor) -> Tensor:
    sq = ad.sum_(ad.mul(t, t), axis=-1)
    return ad.pow_const(ad.add(sq, 1e-24), 0.5)


def build_gallery(encoder, instances) -> Gallery:
    """Photo-branch gallery: frozen embeddings of every instance photo."""
    from .models import canvas_batch
    with ad.no_grad():
        emb = encoder.embed(canvas_batch([inst.photo for inst in instances])).data
    return Gallery(emb, np.array([inst.instance_id for inst in instances]))


def train_triplet(encoder, instances, margin=0.3, epochs=30, batch_size=16,
                  lr=2e-3, seed=0, sketch_of=None, log=None):
    """Triplet training of the shared raster encoder on photo/sketch pairs.

    Anchors are rasterized sketches, positives the paired photos, negatives
    photos of uniformly sampled non-matching instances.  Deterministic under
    `seed`.  Returns the per-epoch mean losses.
    """
    from .models import canvas_batch
    from .optim import Adam
    from .sketch import rasterize

    if len(instances) < 2:
        raise ValueError("triplet training needs at least two instances")
    rng = np.random.Generator(np.random.PCG64(seed))
    if sketch_of is None:
        sketch_of = lambda inst: inst.sketch
    h, w = encoder.height, encoder.width
    sketch_canvases = canvas_batch(
        [rasterize(sketch_of(inst), h, w) for inst in instances])
    photo_canvases = canvas_batch([inst.photo for inst in instances])
    opt = Adam(encoder.params, lr=lr)
    n = len(instances)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            neg = rng.integers(0, n - 1, size=len(idx))
            neg = np.where(neg >= idx, neg + 1, neg)  # uniform over non-matching
            anchors = encoder.embed(sketch_canvases[idx])
            both = encoder.embed(photo_canvases[np.concatenate([idx, neg])])
            pos, negs = both[0:len(idx)], both[len(idx):]
            loss = triplet_loss(anchors, pos, negs, margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        losses.append(epoch_loss / n)
        if log:
            log(epoch, losses[-1])
    return losses


def evaluate_accuracy(encoder, instances, qs=(1, 5, 10), sketch_of=None) -> dict:
    """Acc@q of full-sketch queries against the photo gallery."""
    from .models import canvas_batch
    from .sketch import rasterize

    if sketch_of is None:
        sketch_of = lambda inst: inst.sketch
    gallery = build_gallery(encoder, instances)
    canv = canvas_batch([rasterize(sketch_of(i), encoder.height, encoder.width)
                         for i in instances])
    with ad.no_grad():
        emb = encoder.embed(canv).data
    ranks = [rank_of(emb[i], gallery, inst.instance_id)[0]
             for i, inst in enumerate(instances)]
    out = {f"acc@{q}": acc_at_q(ranks, q) for q in qs}
    out["mean_rank"] = float(np.mean(ranks))
    return out
