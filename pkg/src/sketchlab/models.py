"""Network components: raster encoder with soft attention, hierarchical stroke
encoder with select/value heads, Gaussian policy head, GMM sequence decoder
head, graph-attention layer, and cosine classifier.

Convolutional backbones are replaced by patch pooling at desk scale: the
canvas is cut into a grid of non-overlapping patches, each flattened through a
shared dense layer, which preserves the spatial feature map that the attention
modules need.  Recurrent cells are GRUs throughout.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sketch import RasterCanvas, VectorSketch


def _dense(rng, fan_in, fan_out) -> Tensor:
    scale = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-scale, scale, size=(fan_in, fan_out)), requires_grad=True)


def _bias(fan_out) -> Tensor:
    return Tensor(np.zeros(fan_out), requires_grad=True)


class Module:
    """Named-parameter container with checkpoint plumbing."""

    arch = "module"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def param_list(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for k, p in self.params.items():
            if p.data.shape != arrays[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            p.data = arrays[k].astype(np.float64).copy()

    def clone(self):
        import copy
        other = copy.copy(self)
        other.params = {k: Tensor(p.data.copy(), requires_grad=True)
                        for k, p in self.params.items()}
        other._rebind()
        return other

    def _rebind(self):
        """Re-point internal views at self.params after clone (overridden by
        models composing recurrent cells)."""


def canvas_batch(canvases) -> np.ndarray:
    """Stack canvases (RasterCanvas or 2-D arrays) into a (B, H, W) array."""
    rows = []
    for c in canvases:
        rows.append(c.intensities if isinstance(c, RasterCanvas) else np.asarray(c, dtype=np.float64))
    return np.stack(rows, axis=0)


class GRUCell:
    """Gated recurrent unit; parameters live in the owner's params dict."""

    def __init__(self, owner: Module, prefix: str, input_dim: int, hidden_dim: int, rng):
        self.hidden_dim = hidden_dim
        p = owner.params
        for gate in ("r", "u", "c"):
            p[f"{prefix}_w{gate}"] = _dense(rng, input_dim, hidden_dim)
            p[f"{prefix}_u{gate}"] = _dense(rng, hidden_dim, hidden_dim)
            p[f"{prefix}_b{gate}"] = _bias(hidden_dim)
        self._p = p
        self._prefix = prefix

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        p, pre = self._p, self._prefix
        r = ad.sigmoid(x @ p[f"{pre}_wr"] + h @ p[f"{pre}_ur"] + p[f"{pre}_br"])
        u = ad.sigmoid(x @ p[f"{pre}_wu"] + h @ p[f"{pre}_uu"] + p[f"{pre}_bu"])
        c = ad.tanh(x @ p[f"{pre}_wc"] + ad.mul(r, h) @ p[f"{pre}_uc"] + p[f"{pre}_bc"])
        one_minus_u = ad.add(ad.mul(u, -1.0), 1.0)
        return ad.add(ad.mul(u, h), ad.mul(one_minus_u, c))

    def init_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_dim)))


class RasterEncoder(Module):
    """Patch-pooled embedding network with soft spatial attention.

    Feature map B is a grid of patch features; attention applies the residual
    B + B*f_att(B) before global average pooling; the pooled vector and the
    final projection are both l2-normalised.
    """

    arch = "raster_encoder"

    def __init__(self, height=32, width=32, grid=4, channels=64, embed_dim=64, seed=0):
        super().__init__()
        if height % grid or width % grid:
            raise ValueError("canvas dimensions must be divisible by the patch grid")
        self.height, self.width, self.grid = height, width, grid
        self.channels, self.embed_dim = channels, embed_dim
        self.patch_h, self.patch_w = height // grid, width // grid
        self.ckpt_kwargs = dict(height=height, width=width, grid=grid,
                                channels=channels, embed_dim=embed_dim)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = {
            "patch_w": _dense(rng, self.patch_h * self.patch_w, channels),
            "patch_b": _bias(channels),
            "trunk_w": _dense(rng, channels, channels),
            "trunk_b": _bias(channels),
            "att_w": _dense(rng, channels, 1),
            "att_b": _bias(1),
            "proj_w": _dense(rng, channels, embed_dim),
            "proj_b": _bias(embed_dim),
        }

    def _patches(self, canvases: np.ndarray) -> np.ndarray:
        b, h, w = canvases.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"canvas {h}x{w} does not match encoder {self.height}x{self.width}")
        g, ph, pw = self.grid, self.patch_h, self.patch_w
        x = canvases.reshape(b, g, ph, g, pw).transpose(0, 1, 3, 2, 4)
        return x.reshape(b * g * g, ph * pw)

    def feature_map(self, canvases: np.ndarray) -> Tensor:
        """(B*G, channels) patch features; G = grid*grid spatial cells."""
        patches = Tensor(self._patches(canvases))
        feat = ad.tanh(patches @ self.params["patch_w"] + self.params["patch_b"])
        return ad.tanh(feat @ self.params["trunk_w"] + self.params["trunk_b"])

    def attended(self, canvases: np.ndarray) -> Tensor:
        """Pooled attention state, l2-normalised: one row per canvas."""
        b = canvases.shape[0]
        g2 = self.grid * self.grid
        feat = self.feature_map(canvases)
        logits = ad.reshape(feat @ self.params["att_w"] + self.params["att_b"], (b, g2))
        att = ad.reshape(ad.softmax(logits, axis=1), (b * g2, 1))
        feat_att = ad.add(feat, ad.mul(feat, att))
        pooled = ad.mean(ad.reshape(feat_att, (b, g2, self.channels)), axis=1)
        return ad.l2_normalize(pooled, axis=1)

    def attention_weights(self, canvases: np.ndarray) -> np.ndarray:
        b = canvases.shape[0]
        g2 = self.grid * self.grid
        with ad.no_grad():
            feat = self.feature_map(canvases)
            logits = ad.reshape(feat @ self.params["att_w"] + self.params["att_b"], (b, g2))
            return ad.softmax(logits, axis=1).data

    def embed(self, canvases) -> Tensor:
        """(B, D) unit-norm embeddings for a batch of canvases."""
        if isinstance(canvases, np.ndarray) and canvases.ndim == 2:
            canvases = canvases[None]
        if not isinstance(canvases, np.ndarray):
            canvases = canvas_batch(canvases)
        state = self.attended(canvases)
        return ad.l2_normalize(state @ self.params["proj_w"] + self.params["proj_b"], axis=1)


def embed_raster(canvas: RasterCanvas, enc: RasterEncoder) -> np.ndarray:
    """Unit-norm embedding of one canvas (inference helper, no graph kept)."""
    with ad.no_grad():
        return enc.embed(canvas_batch([canvas])).data[0]


class StrokeHierEncoder(Module):
    """Global-local hierarchical stroke encoder with select and value heads.

    A shared GRU embeds each stroke's point run; a second GRU over the stroke
    features captures the whole-sketch context; the fused per-stroke feature
    is layer_norm(local + global).  The select head emits a two-way
    (select/ignore) distribution per stroke; the value head predicts a scalar
    from the mean fused feature and shares every other parameter with the
    actor.
    """

    arch = "stroke_encoder"

    def __init__(self, hidden=128, seed=0):
        super().__init__()
        self.hidden = hidden
        self.ckpt_kwargs = dict(hidden=hidden)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.local = GRUCell(self, "local", 2, hidden, rng)
        self.global_ = GRUCell(self, "global", hidden, hidden, rng)
        self.params["head_w"] = _dense(rng, hidden, 2)
        self.params["head_b"] = _bias(2)
        self.params["value_w"] = _dense(rng, hidden, 1)
        self.params["value_b"] = _bias(1)

    def _rebind(self):
        import copy
        self.local = copy.copy(self.local)
        self.local._p = self.params
        self.global_ = copy.copy(self.global_)
        self.global_._p = self.params

    def stroke_features(self, sketch: VectorSketch) -> Tensor:
        """(K, hidden) fused per-stroke features."""
        arrays = sketch.stroke_arrays()
        k = len(arrays)
        if k == 0:
            raise ValueError("cannot encode an empty sketch")
        n_max = max(len(a) for a in arrays)
        pts = np.zeros((k, n_max, 2))
        mask = np.zeros((k, n_max, 1))
        for i, a in enumerate(arrays):
            pts[i, :len(a)] = a
            mask[i, :len(a)] = 1.0
        h = self.local.init_state(k)
        for t in range(n_max):
            h_new = self.local.step(Tensor(pts[:, t]), h)
            m = Tensor(mask[:, t])
            h = ad.add(ad.mul(m, h_new), ad.mul(1.0 - mask[:, t], h))
        f_local = h
        g = self.global_.init_state(1)
        for i in range(k):
            g = self.global_.step(f_local[i:i + 1], g)
        fused = ad.layer_norm(ad.add(f_local, g), axis=-1)
        return fused

    def forward(self, sketch: VectorSketch):
        """Returns (fused features (K, hidden), action probabilities (K, 2)).

        Column 0 of the probabilities is `select`, column 1 is `ignore`.
        """
        fused = self.stroke_features(sketch)
        probs = ad.softmax(fused @ self.params["head_w"] + self.params["head_b"], axis=1)
        return fused, probs

    def value(self, sketch: VectorSketch) -> Tensor:
        """Scalar state value from the mean fused stroke feature."""
        fused = self.stroke_features(sketch)
        pooled = ad.mean(fused, axis=0, keepdims=True)
        return ad.reshape(pooled @ self.params["value_w"] + self.params["value_b"], ())


def encode_strokes(sketch: VectorSketch, enc: StrokeHierEncoder):
    """(per-stroke features, select/ignore probabilities) without a graph."""
    with ad.no_grad():
        fused, probs = enc.forward(sketch)
        return fused.data, probs.data


class GaussianPolicyHead(Module):
    """Mean map over frozen encoder state plus a standalone trainable diagonal
    covariance, stored as exponentials so its entries stay positive."""

    arch = "gaussian_policy"

    def __init__(self, state_dim=64, action_dim=64, seed=0):
        super().__init__()
        self.state_dim, self.action_dim = state_dim, action_dim
        self.ckpt_kwargs = dict(state_dim=state_dim, action_dim=action_dim)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = {
            "mu_w": _dense(rng, state_dim, action_dim),
            "mu_b": _bias(action_dim),
            "log_sigma": Tensor(np.zeros(action_dim), requires_grad=True),
        }

    def mean_action(self, state: Tensor) -> Tensor:
        return state @ self.params["mu_w"] + self.params["mu_b"]

    def sigma(self) -> np.ndarray:
        return np.exp(self.params["log_sigma"].data)

    def log_prob(self, mu: Tensor, action: np.ndarray) -> Tensor:
        """Log-density of `action` under N(mu, diag(sigma)); differentiable in
        the mean map and the covariance parameters."""
        d = self.action_dim
        sigma = ad.exp(self.params["log_sigma"])
        diff = ad.add(mu, -np.asarray(action))
        quad = ad.sum_(ad.mul(ad.mul(diff, diff), ad.pow_const(sigma, -1.0)), axis=-1)
        logdet = ad.sum_(self.params["log_sigma"])
        return ad.mul(ad.add(ad.add(quad, logdet), d * np.log(2.0 * np.pi)), -0.5)

    def copy_from_projection(self, enc: RasterEncoder):
        """Initialise the mean map from the encoder's final embedding layer."""
        self.params["mu_w"].data = enc.params["proj_w"].data.copy()
        self.params["mu_b"].data = enc.params["proj_b"].data.copy()


def policy_sample(mu: np.ndarray, sigma: np.ndarray, seed=None, rng=None, xi=None):
    """Sample a_t = mu + xi * sigma and its Gaussian log-density.

    `sigma` is the diagonal of the covariance matrix; pass `xi` to force the
    noise (xi=0 returns the mean).  Deterministic under a fixed seed.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma entries must be positive")
    if xi is None:
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(seed))
        xi = rng.standard_normal(mu.shape)
    action = mu + xi * sigma
    d = mu.shape[-1]
    quad = ((action - mu) ** 2 / sigma).sum(axis=-1)
    log_prob = -0.5 * (d * np.log(2.0 * np.pi) + np.log(sigma).sum(axis=-1) + quad)
    return action, float(log_prob) if np.ndim(log_prob) == 0 else log_prob


class GATLayer(Module):
    """Single graph-attention layer over class-weight nodes."""

    arch = "gat"

    def __init__(self, dim=64, seed=0):
        super().__init__()
        self.dim = dim
        self.ckpt_kwargs = dict(dim=dim)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = {
            "va": _dense(rng, dim, dim),
            "vb": _dense(rng, dim, dim),
            "vc": _dense(rng, dim, dim),
        }

    def refine(self, w: Tensor) -> Tensor:
        """w_i + sum_j a_ij Vc w_j with a = row-softmax of <Va w_i, Vb w_j>."""
        qa = w @ self.params["va"]
        qb = w @ self.params["vb"]
        e = qa @ ad.transpose(qb)
        a = ad.softmax(e, axis=1)
        return ad.add(w, a @ (w @ self.params["vc"]))


def gat_refine(w_in: np.ndarray, layer: GATLayer) -> np.ndarray:
    with ad.no_grad():
        return layer.refine(Tensor(w_in)).data


class CosineClassifier(Module):
    """Cosine-similarity classifier; weight rows are l2-normalised on use."""

    arch = "cosine_classifier"

    def __init__(self, n_classes, dim=64, seed=0):
        super().__init__()
        self.n_classes, self.dim = n_classes, dim
        self.ckpt_kwargs = dict(n_classes=n_classes, dim=dim)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = {"w": Tensor(rng.uniform(-1, 1, size=(n_classes, dim)) / np.sqrt(dim),
                                   requires_grad=True)}

    def logits(self, features: Tensor) -> Tensor:
        w_hat = ad.l2_normalize(self.params["w"], axis=1)
        f_hat = ad.l2_normalize(features, axis=-1)
        return f_hat @ ad.transpose(w_hat)

    def probabilities(self, features: Tensor) -> Tensor:
        return ad.softmax(self.logits(features), axis=-1)


def cosine_classify(feature: np.ndarray, clf: CosineClassifier) -> np.ndarray:
    feature = np.asarray(feature, dtype=np.float64)
    if np.linalg.norm(feature) == 0.0:
        raise ValueError("cannot classify a zero feature vector")
    with ad.no_grad():
        return clf.probabilities(Tensor(feature[None])).data[0]


class GMMDecoderHead(Module):
    """Recurrent decoder emitting a bivariate-Gaussian mixture over coordinate
    offsets plus pen-state logits at every step.

    The per-step output y_t = W_y h_t + b_y has 6M+3 entries: M mixture
    logits, M each of mu_x, mu_y, raw sigma_x, raw sigma_y, raw rho, then 3
    pen logits.  Sigmas go through exp with a 1e-3 additive floor; rho through
    tanh scaled to (-0.999, 0.999).
    """

    arch = "gmm_decoder"

    SIGMA_FLOOR = 1e-3
    RHO_LIMIT = 0.999

    def __init__(self, input_dim, hidden=128, mixtures=20, seed=0):
        super().__init__()
        self.hidden, self.mixtures = hidden, mixtures
        self.ckpt_kwargs = dict(input_dim=input_dim, hidden=hidden, mixtures=mixtures)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.cell = GRUCell(self, "dec", input_dim, hidden, rng)
        self.params["out_w"] = _dense(rng, hidden, 6 * mixtures + 3)
        self.params["out_b"] = _bias(6 * mixtures + 3)

    def _rebind(self):
        import copy
        self.cell = copy.copy(self.cell)
        self.cell._p = self.params

    def step(self, x: Tensor, h: Tensor):
        h = self.cell.step(x, h)
        y = h @ self.params["out_w"] + self.params["out_b"]
        return h, y

    def split(self, y: Tensor) -> dict:
        """Slice the raw output row(s) into constrained mixture parameters."""
        m = self.mixtures
        pi = ad.softmax(y[..., 0:m], axis=-1)
        mu_x = y[..., m:2 * m]
        mu_y = y[..., 2 * m:3 * m]
        sigma_x = ad.add(ad.exp(y[..., 3 * m:4 * m]), self.SIGMA_FLOOR)
        sigma_y = ad.add(ad.exp(y[..., 4 * m:5 * m]), self.SIGMA_FLOOR)
        rho = ad.mul(ad.tanh(y[..., 5 * m:6 * m]), self.RHO_LIMIT)
        pen_logits = y[..., 6 * m:6 * m + 3]
        return {"pi": pi, "mu_x": mu_x, "mu_y": mu_y,
                "sigma_x": sigma_x, "sigma_y": sigma_y, "rho": rho,
                "pen_logits": pen_logits}


def bivariate_normal_logpdf(dx, dy, mu_x, mu_y, sigma_x, sigma_y, rho):
    """Log-density of (dx, dy) under each mixture component (tensor math)."""
    zx = ad.mul(ad.add(mu_x, -dx), ad.pow_const(sigma_x, -1.0))
    zy = ad.mul(ad.add(mu_y, -dy), ad.pow_const(sigma_y, -1.0))
    one_m_r2 = ad.add(ad.mul(ad.mul(rho, rho), -1.0), 1.0)
    z = ad.add(ad.add(ad.mul(zx, zx), ad.mul(zy, zy)),
               ad.mul(ad.mul(ad.mul(rho, zx), zy), -2.0))
    log_norm = ad.add(
        ad.add(ad.log(sigma_x), ad.log(sigma_y)),
        ad.add(ad.mul(ad.log(one_m_r2), 0.5), np.log(2.0 * np.pi)))
    return ad.add(ad.mul(ad.mul(z, ad.pow_const(one_m_r2, -1.0)), -0.5),
                  ad.mul(log_norm, -1.0))


def gmm_mixture_log_density(dx, dy, params: dict) -> Tensor:
    """log sum_j Pi_j N(dx, dy | component j); broadcasts over leading dims."""
    comp = bivariate_normal_logpdf(dx, dy, params["mu_x"], params["mu_y"],
                                   params["sigma_x"], params["sigma_y"], params["rho"])
    return ad.logsumexp(ad.add(ad.log(params["pi"]), comp), axis=-1)
