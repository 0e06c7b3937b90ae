"""Cross-modal pretext tasks over the dual sketch representation.

Vectorization translates a raster canvas to its absolute-coordinate point
sequence; rasterization translates a point sequence back to pixels.  Both are
plain deterministic encoder-decoder models (no VAE, no decoder attention);
after pretraining the decoder is discarded and the source-modality encoder
serves as a frozen feature extractor for linear or low-label evaluation.
Pretext training reads only the dual views, never the labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import GRUCell, Module, _bias, _dense, canvas_batch
from .optim import Adam
from .sketch import rasterize


@dataclass(frozen=True)
class PretextView:
    """Unlabelled dual view of one sketch: the only data pretext tasks see."""

    canvas: np.ndarray       # (H, W) intensities
    rows: np.ndarray         # (N, 5) absolute five-element representation


@dataclass
class PretextConfig:
    task: str = "vectorization"   # vectorization | rasterization
    height: int = 32
    width: int = 32
    grid: int = 4
    channels: int = 48
    latent: int = 48
    hidden: int = 64
    max_len: int = 100

    def __post_init__(self):
        if self.task not in ("vectorization", "rasterization"):
            raise ValueError(f"unknown pretext task {self.task!r}")


def pretext_views(instances, height=32, width=32, max_len=100) -> list[PretextView]:
    """Strip instances down to dual views (the pretext data-access layer)."""
    views = []
    for inst in instances:
        rows = inst.sketch.five_element()[:max_len]
        views.append(PretextView(
            canvas=rasterize(inst.sketch, height, width).intensities, rows=rows))
    return views


class RasterToVector(Module):
    """Raster encoder (patch trunk + global max pooling) and GRU point decoder."""

    arch = "raster_to_vector"

    def __init__(self, config: PretextConfig, seed=0):
        super().__init__()
        self.config = config
        c = config
        self.patch_h, self.patch_w = c.height // c.grid, c.width // c.grid
        self.cells = c.grid * c.grid
        rng = np.random.Generator(np.random.PCG64(seed))
        p = self.params
        p["patch_w"] = _dense(rng, self.patch_h * self.patch_w, c.channels)
        p["patch_b"] = _bias(c.channels)
        p["trunk_w"] = _dense(rng, c.channels, c.channels)
        p["trunk_b"] = _bias(c.channels)
        p["trunk2_w"] = _dense(rng, c.channels, c.channels)
        p["trunk2_b"] = _bias(c.channels)
        p["lat_w"] = _dense(rng, c.channels, c.latent)
        p["lat_b"] = _bias(c.latent)
        p["init_w"] = _dense(rng, c.latent, c.hidden)
        p["init_b"] = _bias(c.hidden)
        self.cell = GRUCell(self, "dec", c.latent + 5, c.hidden, rng)
        p["out_w"] = _dense(rng, c.hidden, 5)
        p["out_b"] = _bias(5)

    def _rebind(self):
        import copy
        self.cell = copy.copy(self.cell)
        self.cell._p = self.params

    def encode(self, canvases: np.ndarray) -> Tensor:
        """(B, latent) representation via patch trunk and max pooling."""
        b, h, w = canvases.shape
        c = self.config
        if (h, w) != (c.height, c.width):
            raise ValueError("canvas does not match the encoder configuration")
        x = canvases.reshape(b, c.grid, self.patch_h, c.grid, self.patch_w)
        x = x.transpose(0, 1, 3, 2, 4).reshape(b * self.cells, -1)
        feat = ad.tanh(Tensor(x) @ self.params["patch_w"] + self.params["patch_b"])
        feat = ad.tanh(feat @ self.params["trunk_w"] + self.params["trunk_b"])
        feat = ad.tanh(feat @ self.params["trunk2_w"] + self.params["trunk2_b"])
        feat = ad.tanh(feat @ self.params["lat_w"] + self.params["lat_b"])
        grid_feat = ad.reshape(feat, (b, self.cells, c.latent))
        # global max pooling over cells (constant gate, exact subgradient)
        gate = (grid_feat.data == grid_feat.data.max(axis=1, keepdims=True))
        gate = gate / np.maximum(gate.sum(axis=1, keepdims=True), 1)
        return ad.sum_(ad.mul(grid_feat, gate), axis=1)

    def decode(self, latent: Tensor, steps: int, teacher_rows: np.ndarray | None = None):
        """(B, steps, 5) raw predictions: two coordinates, three pen logits.

        With `teacher_rows` the previous ground-truth row feeds each step
        (teacher forcing); otherwise the model consumes its own outputs with
        pen states hardened to one-hot.
        """
        b = latent.shape[0]
        h = ad.tanh(latent @ self.params["init_w"] + self.params["init_b"])
        prev = np.zeros((b, 5))
        prev[:, 2] = 1.0  # start: pen touching at the origin
        outputs = []
        for t in range(steps):
            x = ad.concat([latent, Tensor(prev)], axis=1)
            h = self.cell.step(x, h)
            y = h @ self.params["out_w"] + self.params["out_b"]
            outputs.append(ad.reshape(y, (b, 1, 5)))
            if teacher_rows is not None:
                prev = teacher_rows[:, t]
            else:
                prev = y.data.copy()
                pen = np.argmax(prev[:, 2:5], axis=1)
                prev[:, 2:5] = np.eye(3)[pen]
                prev[:, 0:2] = np.clip(prev[:, 0:2], 0.0, 1.0)
        return ad.concat(outputs, axis=1)


def greedy_vector_decode(model: RasterToVector, canvas: np.ndarray):
    """Greedy raster-to-vector translation of one canvas.

    Decodes unforced rows until the pen reaches end-of-drawing or the
    configured max length, and regroups the absolute coordinates into a
    VectorSketch at stroke boundaries.
    """
    from .sketch import sketch_from_arrays

    c = model.config
    with ad.no_grad():
        latent = model.encode(canvas[None])
        pred = model.decode(latent, c.max_len).data[0]
    strokes, current = [], []
    for t in range(len(pred)):
        x, y = np.clip(pred[t, 0:2], 0.0, 1.0)
        pen = int(np.argmax(pred[t, 2:5]))
        current.append((x, y))
        if pen in (1, 2):
            strokes.append(np.array(current))
            current = []
        if pen == 2:
            pred = pred[:t + 1]
            break
    if current:
        strokes.append(np.array(current))
    return sketch_from_arrays(strokes), pred


class VectorToRaster(Module):
    """GRU sequence encoder and dense patch decoder back to pixel space."""

    arch = "vector_to_raster"

    def __init__(self, config: PretextConfig, seed=0):
        super().__init__()
        self.config = config
        c = config
        self.patch_h, self.patch_w = c.height // c.grid, c.width // c.grid
        self.cells = c.grid * c.grid
        rng = np.random.Generator(np.random.PCG64(seed))
        p = self.params
        self.cell = GRUCell(self, "enc", 5, c.hidden, rng)
        p["lat_w"] = _dense(rng, c.hidden, c.latent)
        p["lat_b"] = _bias(c.latent)
        p["up_w"] = _dense(rng, c.latent, self.cells * c.channels)
        p["up_b"] = _bias(self.cells * c.channels)
        p["pix_w"] = _dense(rng, c.channels, self.patch_h * self.patch_w)
        p["pix_b"] = _bias(self.patch_h * self.patch_w)

    def _rebind(self):
        import copy
        self.cell = copy.copy(self.cell)
        self.cell._p = self.params

    def encode(self, rows_batch: np.ndarray, lengths: np.ndarray) -> Tensor:
        """(B, latent) from the final hidden state of the sequence GRU."""
        b, t_max, _ = rows_batch.shape
        h = self.cell.init_state(b)
        for t in range(t_max):
            h_new = self.cell.step(Tensor(rows_batch[:, t]), h)
            m = (t < lengths).astype(np.float64)[:, None]
            h = ad.add(ad.mul(Tensor(m), h_new), ad.mul(1.0 - m, h))
        return ad.tanh(h @ self.params["lat_w"] + self.params["lat_b"])

    def decode(self, latent: Tensor) -> Tensor:
        """(B, H, W) sigmoid intensities assembled from per-cell patches."""
        b = latent.shape[0]
        c = self.config
        up = ad.tanh(latent @ self.params["up_w"] + self.params["up_b"])
        cells = ad.reshape(up, (b * self.cells, c.channels))
        pix = ad.sigmoid(cells @ self.params["pix_w"] + self.params["pix_b"])
        grid = ad.reshape(pix, (b, c.grid, c.grid, self.patch_h, self.patch_w))
        grid = ad.transpose(grid, (0, 1, 3, 2, 4))
        return ad.reshape(grid, (b, c.height, c.width))


# -- losses ---------------------------------------------------------------------

def vectorization_loss(predicted: Tensor, target_rows: np.ndarray,
                       lengths: np.ndarray | None = None):
    """Coordinate squared error plus pen cross-entropy, each averaged per step.

    `predicted` is (B, T, 5) raw decoder output aligned to the ground-truth
    rows by teacher forcing; a length mismatch is rejected.  Returns
    (total, coordinate_term, pen_term); total == coord + pen exactly.
    """
    b, t_max, k = predicted.shape
    if target_rows.shape != (b, t_max, 5) or k != 5:
        raise ValueError("prediction and ground truth sequences must align")
    if lengths is None:
        lengths = np.full(b, t_max)
    mask = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
    denom = np.maximum(lengths, 1).astype(np.float64)

    coords = predicted[:, :, 0:2]
    diff = ad.add(coords, -target_rows[:, :, 0:2])
    sq = ad.sum_(ad.mul(diff, diff), axis=2)
    coord_term = ad.mean(ad.mul(ad.sum_(ad.mul(sq, mask), axis=1), 1.0 / denom))

    pen_ll = ad.sum_(ad.mul(ad.log_softmax(predicted[:, :, 2:5], axis=2),
                            target_rows[:, :, 2:5]), axis=2)
    pen_term = ad.mean(ad.mul(ad.sum_(ad.mul(ad.mul(pen_ll, -1.0), mask), axis=1),
                              1.0 / denom))
    return ad.add(coord_term, pen_term), coord_term, pen_term


def rasterization_loss(decoded: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared pixel error; canvas dimensions must match."""
    if tuple(decoded.shape) != tuple(np.asarray(target).shape):
        raise ValueError("canvas dimensions must match")
    return ad.squared_error(decoded, np.asarray(target, dtype=np.float64))


# -- training and evaluation -------------------------------------------------------

def rows_batch_of(views, max_len: int):
    lengths = np.array([min(len(v.rows), max_len) for v in views])
    t_max = max(1, int(lengths.max()))
    out = np.zeros((len(views), t_max, 5))
    out[:, :, 4] = 1.0
    for i, v in enumerate(views):
        out[i, :lengths[i]] = v.rows[:lengths[i]]
    return out, lengths


def pretrain(views: list[PretextView], config: PretextConfig, epochs: int = 30,
             lr: float = 2e-3, batch_size: int = 16, seed: int = 0, log=None):
    """Train the selected translation model; returns (encoder_model, losses).

    The decoder is part of the returned module but downstream evaluation uses
    only `encode`; zero epochs returns the randomly initialised encoder.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    model = (RasterToVector(config, seed=seed) if config.task == "vectorization"
             else VectorToRaster(config, seed=seed))
    canvases = np.stack([v.canvas for v in views])
    rows, lengths = rows_batch_of(views, config.max_len)
    opt = Adam(model.params, lr=lr)
    losses = []
    n = len(views)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if config.task == "vectorization":
                latent = model.encode(canvases[idx])
                pred = model.decode(latent, rows.shape[1], teacher_rows=rows[idx])
                loss, _, _ = vectorization_loss(pred, rows[idx], lengths[idx])
            else:
                latent = model.encode(rows[idx], lengths[idx])
                decoded = model.decode(latent)
                loss = rasterization_loss(decoded, canvases[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
        if log:
            log(epoch, losses[-1])
    return model, losses


def encode_features(model, instances, config: PretextConfig) -> np.ndarray:
    """Frozen features for labelled instances via the model's source modality."""
    with ad.no_grad():
        if isinstance(model, RasterToVector):
            canvases = np.stack([
                rasterize(i.sketch, config.height, config.width).intensities
                for i in instances])
            return model.encode(canvases).data
        views = pretext_views(instances, config.height, config.width, config.max_len)
        rows, lengths = rows_batch_of(views, config.max_len)
        return model.encode(rows, lengths).data


def linear_eval(model, instances, config: PretextConfig, epochs: int = 120,
                lr: float = 5e-2, seed: int = 0, train_fraction: float = 0.5) -> dict:
    """Train a dense+softmax head on frozen features; report top-1/top-5.

    The head trains on a stratified `train_fraction` of the instances and
    accuracy is reported on the held-out remainder (on the training subset
    itself when the fraction is 1).
    """
    if not (0.0 < train_fraction <= 1.0):
        raise ValueError("train_fraction must lie in (0, 1]")
    feats = encode_features(model, instances, config)
    labels = np.array([i.class_id for i in instances])
    n_classes = len(set(labels.tolist()))
    rng = np.random.Generator(np.random.PCG64(seed))
    train_idx = _stratified_subset(labels, train_fraction, rng)
    held = np.setdiff1d(np.arange(len(labels)), train_idx)
    eval_idx = held if len(held) else train_idx

    d = feats.shape[1]
    w = Tensor(rng.uniform(-0.1, 0.1, size=(d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    onehot = np.eye(n_classes)[labels]
    opt = Adam({"w": w, "b": b}, lr=lr)
    for _ in range(epochs):
        logits = Tensor(feats[train_idx]) @ w + b
        loss = ad.cross_entropy(logits, onehot[train_idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with ad.no_grad():
        scores = (Tensor(feats[eval_idx]) @ w + b).data
    order = np.argsort(-scores, axis=1)
    ev_labels = labels[eval_idx]
    top1 = float(np.mean(order[:, 0] == ev_labels))
    top5 = float(np.mean([ev_labels[i] in order[i, :5] for i in range(len(ev_labels))]))
    return {"top1": top1, "top5": top5, "n_train": int(len(train_idx)),
            "n_eval": int(len(eval_idx))}


def _stratified_subset(labels: np.ndarray, fraction: float, rng) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(len(labels))
    picks = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(fraction * len(idx))))
        picks.append(rng.choice(idx, size=k, replace=False))
    return np.concatenate(picks)
