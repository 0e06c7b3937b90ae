"""Semi-supervised retrieval with a photo-to-sketch generator in the loop.

The generator is a VAE-style sequence model: a patch-pooled photo encoder
keeps a spatial feature grid, a glimpse (2-D attention) module looks back at
the grid every step, and a recurrent head emits a 20-component bivariate
Gaussian mixture over coordinate offsets plus pen-state logits.  A pair
discriminator scores (photo, rasterized sketch) realness; its output weights
the pseudo-pair triplet terms, while a frozen relative teacher regularises
pair distances.  The generator improves through REINFORCE on a single
sequence-level reward assembled from the retrieval triplet loss and the
discriminator, updating only the final output layer by policy gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import (GMMDecoderHead, Module, RasterEncoder, _bias, _dense,
                     canvas_batch, gmm_mixture_log_density)
from .optim import Adam
from .ranking import Gallery, build_gallery, triplet_loss, _row_norm
from .sketch import VectorSketch, rasterize, sketch_from_arrays, to_offsets


# -- generator ------------------------------------------------------------------

class PhotoToSketchGenerator(Module):
    """Sequential sketch-coordinate decoder conditioned on a photo.

    Latent: z = mu + sigma * xi (dim 128); decoder start state tanh(W_z z).
    Every step attends over the photo's spatial feature grid (3x3 neighborhood
    kernel), consumes the previous offset row, and emits mixture parameters.
    """

    arch = "photo_to_sketch"

    START_TOKEN = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    ORIGIN = (0.5, 0.5)

    def __init__(self, height=32, width=32, grid=4, channels=64, latent=128,
                 hidden=128, mixtures=20, att_dim=32, max_len=100, seed=0):
        super().__init__()
        self.height, self.width, self.grid = height, width, grid
        self.channels, self.latent, self.hidden = channels, latent, hidden
        self.mixtures, self.att_dim, self.max_len = mixtures, att_dim, max_len
        self.ckpt_kwargs = dict(height=height, width=width, grid=grid,
                                channels=channels, latent=latent, hidden=hidden,
                                mixtures=mixtures, att_dim=att_dim, max_len=max_len)
        self.patch_h, self.patch_w = height // grid, width // grid
        self.cells = grid * grid
        rng = np.random.Generator(np.random.PCG64(seed))
        p = self.params
        p["patch_w"] = _dense(rng, self.patch_h * self.patch_w, channels)
        p["patch_b"] = _bias(channels)
        p["mu_w"] = _dense(rng, channels, latent)
        p["mu_b"] = _bias(latent)
        p["logvar_w"] = _dense(rng, channels, latent)
        p["logvar_b"] = _bias(latent)
        p["init_w"] = _dense(rng, latent, hidden)
        p["init_b"] = _bias(hidden)
        p["att_grid_w"] = _dense(rng, 9 * channels, att_dim)   # 3x3 aggregation
        p["att_state_w"] = _dense(rng, hidden, att_dim)
        p["att_score_w"] = _dense(rng, att_dim, 1)
        self.decoder = GMMDecoderHead(input_dim=channels + 5, hidden=hidden,
                                      mixtures=mixtures, seed=seed + 1)
        for k, v in self.decoder.params.items():
            p["dec_" + k] = v  # alias the same Tensor objects under one dict
        self._neighbors = self._neighbor_index()

    def _rebind(self):
        import copy
        self.decoder = copy.copy(self.decoder)
        self.decoder.params = {k[4:]: v for k, v in self.params.items()
                               if k.startswith("dec_")}
        self.decoder.cell = copy.copy(self.decoder.cell)
        self.decoder.cell._p = self.decoder.params

    def _neighbor_index(self) -> np.ndarray:
        g = self.grid
        idx = np.full((self.cells, 9), self.cells, dtype=np.int64)  # pad row
        for r in range(g):
            for c in range(g):
                for k, (dr, dc) in enumerate([(i, j) for i in (-1, 0, 1)
                                              for j in (-1, 0, 1)]):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < g and 0 <= cc < g:
                        idx[r * g + c, k] = rr * g + cc
        return idx.reshape(-1)

    def feature_grid(self, canvases: np.ndarray) -> Tensor:
        """(B, cells, channels) patch features of a photo batch."""
        b, h, w = canvases.shape
        g, ph, pw = self.grid, self.patch_h, self.patch_w
        x = canvases.reshape(b, g, ph, g, pw).transpose(0, 1, 3, 2, 4)
        patches = Tensor(x.reshape(b * self.cells, ph * pw))
        feat = ad.tanh(patches @ self.params["patch_w"] + self.params["patch_b"])
        return ad.reshape(feat, (b, self.cells, self.channels))

    def latent_params(self, grid_feat: Tensor):
        pooled = ad.mean(grid_feat, axis=1)
        mu = pooled @ self.params["mu_w"] + self.params["mu_b"]
        logvar = pooled @ self.params["logvar_w"] + self.params["logvar_b"]
        sigma = ad.exp(ad.mul(logvar, 0.5))
        return mu, sigma

    def initial_state(self, z: Tensor) -> Tensor:
        return ad.tanh(z @ self.params["init_w"] + self.params["init_b"])

    def _unfolded(self, grid_feat: Tensor) -> Tensor:
        """(B, cells, 9*channels) zero-padded 3x3 neighborhoods."""
        b = grid_feat.shape[0]
        padded = ad.concat([grid_feat, Tensor(np.zeros((b, 1, self.channels)))], axis=1)
        gathered = padded[:, self._neighbors, :]  # (B, cells*9, channels)
        return ad.reshape(gathered, (b, self.cells, 9 * self.channels))

    def glimpse(self, grid_feat: Tensor, unfolded: Tensor, h_prev: Tensor) -> Tensor:
        """Attention-weighted sum of grid cells given the decoder state."""
        b = grid_feat.shape[0]
        flat = ad.reshape(unfolded, (b * self.cells, 9 * self.channels))
        scores_grid = ad.reshape(flat @ self.params["att_grid_w"],
                                 (b, self.cells, self.att_dim))
        state = ad.reshape(h_prev @ self.params["att_state_w"], (b, 1, self.att_dim))
        j = ad.tanh(ad.add(scores_grid, state))
        logits = ad.reshape(
            ad.reshape(j, (b * self.cells, self.att_dim)) @ self.params["att_score_w"],
            (b, self.cells))
        alpha = ad.softmax(logits, axis=1)
        weighted = ad.mul(grid_feat, ad.reshape(alpha, (b, self.cells, 1)))
        return ad.sum_(weighted, axis=1), alpha

    def decode_step(self, grid_feat, unfolded, h, prev_row: Tensor):
        g_t, alpha = self.glimpse(grid_feat, unfolded, h)
        x = ad.concat([g_t, prev_row], axis=1)
        h_new, y = self.decoder.step(x, h)
        return h_new, self.decoder.split(y), alpha

    def teacher_forced_params(self, canvases: np.ndarray, targets: np.ndarray,
                              rng=None):
        """Mixture parameters at every step of teacher-forced decoding.

        `targets` is a (B, T, 5) padded offset-row batch; returns the per-step
        split parameter dicts plus (mu, sigma) of the latent.
        """
        b, t_max, _ = targets.shape
        grid_feat = self.feature_grid(canvases)
        mu, sigma = self.latent_params(grid_feat)
        xi = rng.standard_normal((b, self.latent)) if rng is not None else None
        z = ad.add(mu, ad.mul(sigma, xi)) if xi is not None else mu
        h = self.initial_state(z)
        unfolded = self._unfolded(grid_feat)
        prev = np.tile(self.START_TOKEN, (b, 1))
        step_params = []
        for t in range(t_max):
            h, params, _ = self.decode_step(grid_feat, unfolded, h, Tensor(prev))
            step_params.append(params)
            prev = targets[:, t]
        return step_params, mu, sigma

    def sample_sketches(self, canvases: np.ndarray, rng, greedy: bool = False,
                        temperature: float = 1.0):
        """Decode offset rows autoregressively for a photo batch.

        Returns (sketches, rows, logprob_terms) where rows is the (B, T, 5)
        array of emitted rows and logprob_terms the differentiable per-step
        log-likelihood (mixture + pen) of the emitted rows, already masked
        past each sequence's end-of-drawing token; only the final dense layer
        receives policy gradients downstream.
        """
        b = canvases.shape[0]
        grid_feat = self.feature_grid(canvases)
        mu, sigma = self.latent_params(grid_feat)
        xi = rng.standard_normal((b, self.latent)) if not greedy else 0.0
        z = ad.add(mu, ad.mul(sigma, xi)) if not greedy else mu
        h = self.initial_state(z)
        unfolded = self._unfolded(grid_feat)
        prev = np.tile(self.START_TOKEN, (b, 1))
        alive = np.ones(b, dtype=bool)
        rows = []
        lp_terms = []
        for _ in range(self.max_len):
            h, params, _ = self.decode_step(grid_feat, unfolded, h, Tensor(prev))
            pi = params["pi"].data
            pen_logits = params["pen_logits"].data
            row = np.zeros((b, 5))
            for i in range(b):
                if greedy:
                    j = int(np.argmax(pi[i]))
                    dx = params["mu_x"].data[i, j]
                    dy = params["mu_y"].data[i, j]
                    pen = int(np.argmax(pen_logits[i]))
                else:
                    j = int(rng.choice(self.mixtures, p=pi[i] / pi[i].sum()))
                    sx = params["sigma_x"].data[i, j] * temperature
                    sy = params["sigma_y"].data[i, j] * temperature
                    rho = params["rho"].data[i, j]
                    e1, e2 = rng.standard_normal(2)
                    dx = params["mu_x"].data[i, j] + sx * e1
                    dy = params["mu_y"].data[i, j] + sy * (rho * e1 + np.sqrt(1 - rho ** 2) * e2)
                    pl = pen_logits[i] - pen_logits[i].max()
                    pp = np.exp(pl) / np.exp(pl).sum()
                    pen = int(rng.choice(3, p=pp))
                row[i, 0], row[i, 1] = dx, dy
                row[i, 2 + pen] = 1.0
            lp = gmm_mixture_log_density(row[:, 0:1], row[:, 1:2], params)
            pen_lp = ad.sum_(ad.mul(ad.log_softmax(params["pen_logits"], axis=1),
                                    row[:, 2:5]), axis=1)
            mask = alive.astype(np.float64)
            lp_terms.append(ad.mul(ad.add(lp, pen_lp), mask))
            rows.append(row.copy())
            alive = alive & (row[:, 4] != 1.0)
            prev = row
            if not alive.any():
                break
        rows = np.stack(rows, axis=1)
        return self._rows_to_sketches(rows), rows, lp_terms

    def _rows_to_sketches(self, rows: np.ndarray) -> list[VectorSketch]:
        sketches = []
        for i in range(rows.shape[0]):
            x, y = self.ORIGIN
            strokes, current = [], [(x, y)]
            for t in range(rows.shape[1]):
                dx, dy, q1, q2, q3 = rows[i, t]
                x = float(np.clip(x + dx, 0.0, 1.0))
                y = float(np.clip(y + dy, 0.0, 1.0))
                current.append((x, y))
                if q2 == 1.0 or q3 == 1.0:
                    strokes.append(np.array(current))
                    current = []  # pen travels unseen to the next point
                if q3 == 1.0:
                    break
            if current:
                strokes.append(np.array(current))
            sketches.append(sketch_from_arrays(strokes))
        return sketches


# -- losses -----------------------------------------------------------------------

def gmm_step_nll(offset: np.ndarray, pen_onehot: np.ndarray, params: dict) -> Tensor:
    """-log mixture density of the offset minus the pen log-likelihood."""
    ld = gmm_mixture_log_density(offset[..., 0:1], offset[..., 1:2], params)
    pen_ll = ad.sum_(ad.mul(ad.log_softmax(params["pen_logits"], axis=-1),
                            pen_onehot), axis=-1)
    return ad.mul(ad.add(ld, pen_ll), -1.0)


def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims."""
    var = ad.mul(sigma, sigma)
    term = ad.add(ad.add(ad.mul(mu, mu), var),
                  ad.add(ad.mul(ad.log(var), -1.0), -1.0))
    return ad.mul(ad.sum_(term, axis=-1), 0.5)


def vae_loss(reconstruction_nll: Tensor, kl_term: Tensor, kl_weight: float = 1.0) -> Tensor:
    """Weighted sum of the sequence NLL and the latent KL."""
    return ad.add(reconstruction_nll, ad.mul(kl_term, kl_weight))


def sequence_nll(generator: PhotoToSketchGenerator, canvases: np.ndarray,
                 targets: np.ndarray, lengths: np.ndarray, rng=None):
    """Teacher-forced reconstruction NLL, averaged per-step then per-sample.

    Returns (nll, kl) both as scalar Tensors (batch means).
    """
    step_params, mu, sigma = generator.teacher_forced_params(canvases, targets, rng)
    total = None
    for t, params in enumerate(step_params):
        step_mask = (t < lengths).astype(np.float64)
        nll_t = ad.mul(gmm_step_nll(targets[:, t, 0:2], targets[:, t, 2:5], params),
                       step_mask)
        total = nll_t if total is None else ad.add(total, nll_t)
    per_sample = ad.mul(total, 1.0 / np.maximum(lengths, 1))
    kl = ad.mean(kl_to_standard_normal(mu, sigma))
    return ad.mean(per_sample), kl


def offsets_batch(sketches, max_len: int):
    """Pad sketches' offset rows to a common length: (B, T, 5) plus lengths."""
    rows = []
    for sk in sketches:
        seq = to_offsets(sk)
        r = np.asarray(seq.offsets, dtype=np.float64)[:max_len]
        rows.append(r)
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    t_max = max(1, int(lengths.max()))
    out = np.zeros((len(rows), t_max, 5))
    out[:, :, 4] = 1.0  # padded steps look like end-of-drawing
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out, lengths


# -- discriminator -----------------------------------------------------------------

class PairDiscriminator(Module):
    """Sigmoid pair classifier over channel-concatenated photo/sketch canvases."""

    arch = "pair_discriminator"

    def __init__(self, height=32, width=32, pool=2, hidden=64, seed=0):
        super().__init__()
        self.height, self.width, self.pool = height, width, pool
        self.ckpt_kwargs = dict(height=height, width=width, pool=pool, hidden=hidden)
        in_dim = 2 * (height // pool) * (width // pool)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = {
            "w1": _dense(rng, in_dim, hidden), "b1": _bias(hidden),
            "w2": _dense(rng, hidden, 1), "b2": _bias(1),
        }

    def _features(self, photos: np.ndarray, sketches: np.ndarray) -> np.ndarray:
        def down(x):
            b, h, w = x.shape
            p = self.pool
            return x.reshape(b, h // p, p, w // p, p).mean(axis=(2, 4)).reshape(b, -1)
        return np.concatenate([down(photos), down(sketches)], axis=1)

    def score(self, photos: np.ndarray, sketches: np.ndarray) -> Tensor:
        feats = Tensor(self._features(photos, sketches))
        h = ad.tanh(feats @ self.params["w1"] + self.params["b1"])
        return ad.reshape(ad.sigmoid(h @ self.params["w2"] + self.params["b2"]), (-1,))


def discriminator_loss(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    """Binary cross-entropy with label 1 for real pairs, 0 for synthetic."""
    eps = 1e-9
    loss_real = ad.mul(ad.mean(ad.log(ad.add(scores_real, eps))), -1.0)
    one_minus = ad.add(ad.mul(scores_fake, -1.0), 1.0)
    loss_fake = ad.mul(ad.mean(ad.log(ad.add(one_minus, eps))), -1.0)
    return ad.add(loss_real, loss_fake)


# -- distillation and the joint retrieval loss ------------------------------------

def pair_distance(encoder: RasterEncoder, photos: np.ndarray,
                  sketches: np.ndarray) -> Tensor:
    """Euclidean distance between paired photo and sketch embeddings (rows)."""
    both = encoder.embed(np.concatenate([photos, sketches], axis=0))
    n = photos.shape[0]
    return _row_norm(ad.add(both[0:n], ad.mul(both[n:], -1.0)))


def kd_relative(student: RasterEncoder, teacher: RasterEncoder,
                photos: np.ndarray, sketches: np.ndarray) -> Tensor:
    """Relative-teacher distillation: | d_T(p, s) - d_S(p, s) |, batch mean."""
    with ad.no_grad():
        d_teacher = pair_distance(teacher, photos, sketches).data
    d_student = pair_distance(student, photos, sketches)
    return ad.mean(abs_diff(d_student, d_teacher))


def abs_diff(a: Tensor, b) -> Tensor:
    return ad.abs_(ad.add(a, ad.mul(b, -1.0) if isinstance(b, Tensor) else -np.asarray(b)))


def weighted_triplet(encoder: RasterEncoder, anchors: np.ndarray,
                     positives: np.ndarray, negatives: np.ndarray,
                     margin: float, weights: np.ndarray | None = None) -> Tensor:
    """Per-row hinge triplet loss, optionally instance-weighted, batch mean."""
    n = anchors.shape[0]
    all_emb = encoder.embed(np.concatenate([anchors, positives, negatives], axis=0))
    a, p, g = all_emb[0:n], all_emb[n:2 * n], all_emb[2 * n:]
    d_pos = _row_norm(ad.add(a, ad.mul(p, -1.0)))
    d_neg = _row_norm(ad.add(a, ad.mul(g, -1.0)))
    hinge = ad.relu(ad.add(ad.add(d_pos, ad.mul(d_neg, -1.0)), margin))
    if weights is not None:
        hinge = ad.mul(hinge, weights)
    return ad.mean(hinge)


def semisup_retrieval_loss(encoder: RasterEncoder, teacher: RasterEncoder,
                           labelled: dict, pseudo: dict, weights: np.ndarray,
                           margin: float = 0.3, kd_weight: float = 0.1) -> Tensor:
    """Triplet on labelled pairs + instance-weighted triplet on pseudo pairs
    + relative-teacher distillation over both batches.

    `labelled`/`pseudo` carry 'anchors', 'positives', 'negatives' canvas
    arrays; `weights` are the discriminator scores of the pseudo pairs
    (treated as constants).
    """
    loss = weighted_triplet(encoder, labelled["anchors"], labelled["positives"],
                            labelled["negatives"], margin)
    loss = ad.add(loss, weighted_triplet(encoder, pseudo["anchors"],
                                         pseudo["positives"], pseudo["negatives"],
                                         margin, weights=weights))
    if kd_weight:
        photos = np.concatenate([labelled["positives"], pseudo["positives"]], axis=0)
        sketches = np.concatenate([labelled["anchors"], pseudo["anchors"]], axis=0)
        loss = ad.add(loss, ad.mul(kd_relative(encoder, teacher, photos, sketches),
                                   kd_weight))
    return loss


# -- generator reward and policy-gradient update -----------------------------------

def generator_reward(encoder: RasterEncoder, disc: PairDiscriminator,
                     photo: np.ndarray, sketch_canvas: np.ndarray,
                     negative: np.ndarray, margin: float = 0.3,
                     r1: float = 1.0, r2: float = 1.0) -> float:
    """Single sequence-level reward: -r1 * triplet + r2 * discriminator."""
    with ad.no_grad():
        emb = encoder.embed(np.stack([sketch_canvas, photo, negative])).data
        trip = triplet_loss(emb[0], emb[1], emb[2], margin)
        score = float(disc.score(photo[None], sketch_canvas[None]).data[0])
    return -r1 * trip + r2 * score


def reinforce_generator_update(generator: PhotoToSketchGenerator,
                               lp_terms, rewards: np.ndarray,
                               optimizer: Adam, pg_weight: float = 10.0,
                               vae_term: Tensor | None = None) -> float:
    """Policy-gradient step on the decoder's final dense layer only.

    The surrogate -pg_weight * mean_b sum_t logprob_bt * R_b descends to
    reinforce high-reward sequences; its gradients are masked to W_y/b_y.
    The optional supervised VAE term (labelled data) updates every parameter.
    """
    total = None
    for lp in lp_terms:
        term = ad.mul(lp, rewards)
        total = term if total is None else ad.add(total, term)
    pg_loss = ad.mul(ad.mean(total), -pg_weight)

    generator.zero_grad()
    pg_loss.backward()
    pg_grads = {}
    for name in ("dec_out_w", "dec_out_b"):
        g = generator.params[name].grad
        pg_grads[name] = None if g is None else g.copy()
    generator.zero_grad()
    if vae_term is not None:
        vae_term.backward()
    for name, g in pg_grads.items():
        if g is not None:
            p = generator.params[name]
            if p.grad is None:
                p.grad = g
            else:
                p.grad += g
    optimizer.step()
    return pg_loss.item()


# -- the joint semi-supervised loop ------------------------------------------------

@dataclass
class JointConfig:
    margin: float = 0.3
    kd_weight: float = 0.1
    kl_weight: float = 1.0
    reward_r1: float = 1.0
    reward_r2: float = 1.0
    pg_weight: float = 10.0
    k_retrieval: int = 5
    k_generator: int = 5
    batch_size: int = 8
    retrieval_lr: float = 1e-3
    generator_lr: float = 2e-3
    disc_lr: float = 2e-3


def pretrain_generator(generator: PhotoToSketchGenerator, instances,
                       epochs: int = 40, lr: float = 2e-3, batch_size: int = 16,
                       seed: int = 0, kl_weight: float = 1.0, log=None) -> list:
    """Supervised VAE pretraining of the generator on labelled pairs."""
    rng = np.random.Generator(np.random.PCG64(seed))
    photos = canvas_batch([inst.photo for inst in instances])
    targets, lengths = offsets_batch([inst.sketch for inst in instances],
                                     generator.max_len)
    opt = Adam(generator.params, lr=lr)
    losses = []
    n = len(instances)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            nll, kl = sequence_nll(generator, photos[idx], targets[idx],
                                   lengths[idx], rng)
            loss = vae_loss(nll, kl, kl_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        losses.append(epoch_loss / n)
        if log:
            log(epoch, losses[-1])
    return losses


def joint_train(labelled, unlabelled, encoder: RasterEncoder,
                generator: PhotoToSketchGenerator, disc: PairDiscriminator,
                config: JointConfig | None = None, rounds: int = 3,
                seed: int = 0, log=None) -> dict:
    """Alternating semi-supervised training (retrieval+discriminator steps,
    then generator steps), assuming encoder and generator are pretrained on
    the labelled set.

    Returns diagnostics including discriminator score summaries.
    """
    config = config or JointConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    teacher = encoder.clone()

    lab_photos = canvas_batch([i.photo for i in labelled])
    lab_sketch = canvas_batch([rasterize(i.sketch, encoder.height, encoder.width)
                               for i in labelled])
    unl_photos = canvas_batch([i.photo for i in unlabelled])

    opt_f = Adam(encoder.params, lr=config.retrieval_lr)
    opt_g = Adam(generator.params, lr=config.generator_lr)
    opt_d = Adam(disc.params, lr=config.disc_lr)

    lab_targets, lab_lengths = offsets_batch([i.sketch for i in labelled],
                                             generator.max_len)

    def pseudo_canvases(photo_batch: np.ndarray, greedy=True):
        sketches, rows, lps = generator.sample_sketches(photo_batch, rng,
                                                        greedy=greedy)
        canv = canvas_batch([rasterize(s, encoder.height, encoder.width)
                             for s in sketches])
        return canv, rows, lps

    diag = {"disc_real": [], "disc_fake": [], "f_loss": [], "g_pg": []}
    n_lab, n_unl = len(labelled), len(unlabelled)
    bs = config.batch_size
    for rnd in range(rounds):
        for _ in range(config.k_retrieval):
            li = rng.choice(n_lab, size=min(bs, n_lab), replace=False)
            ui = rng.choice(n_unl, size=min(bs, n_unl), replace=False)
            with ad.no_grad():
                pseudo_canv, _, _ = pseudo_canvases(unl_photos[ui])
            neg_l = _random_negatives(rng, lab_photos, li)
            neg_u = _random_negatives(rng, unl_photos, ui)
            with ad.no_grad():
                weights = disc.score(unl_photos[ui], pseudo_canv).data
            loss = semisup_retrieval_loss(
                encoder, teacher,
                {"anchors": lab_sketch[li], "positives": lab_photos[li],
                 "negatives": neg_l},
                {"anchors": pseudo_canv, "positives": unl_photos[ui],
                 "negatives": neg_u},
                weights, margin=config.margin, kd_weight=config.kd_weight)
            opt_f.zero_grad()
            loss.backward()
            opt_f.step()
            diag["f_loss"].append(loss.item())

            d_loss = discriminator_loss(disc.score(lab_photos[li], lab_sketch[li]),
                                        disc.score(unl_photos[ui], pseudo_canv))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

        for _ in range(config.k_generator):
            li = rng.choice(n_lab, size=min(bs, n_lab), replace=False)
            ui = rng.choice(n_unl, size=min(bs, n_unl), replace=False)
            photos = np.concatenate([lab_photos[li], unl_photos[ui]], axis=0)
            sketches, rows, lps = generator.sample_sketches(photos, rng,
                                                            greedy=False)
            canv = canvas_batch([rasterize(s, encoder.height, encoder.width)
                                 for s in sketches])
            rewards = np.array([
                generator_reward(encoder, disc, photos[i], canv[i],
                                 photos[(i + 1) % len(photos)],
                                 margin=config.margin,
                                 r1=config.reward_r1, r2=config.reward_r2)
                for i in range(len(photos))])
            nll, kl = sequence_nll(generator, lab_photos[li], lab_targets[li],
                                   lab_lengths[li], rng)
            vae_term = vae_loss(nll, kl, config.kl_weight)
            pg = reinforce_generator_update(generator, lps, rewards, opt_g,
                                            pg_weight=config.pg_weight,
                                            vae_term=vae_term)
            diag["g_pg"].append(pg)

        with ad.no_grad():
            pseudo_canv, _, _ = pseudo_canvases(unl_photos[:min(32, n_unl)])
            diag["disc_real"].append(
                float(disc.score(lab_photos[:min(32, n_lab)],
                                 lab_sketch[:min(32, n_lab)]).data.mean()))
            diag["disc_fake"].append(
                float(disc.score(unl_photos[:min(32, n_unl)], pseudo_canv).data.mean()))
        if log:
            log(rnd, {k: v[-1] for k, v in diag.items() if v})
    diag["teacher"] = teacher
    return diag


def _random_negatives(rng, photos: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n = len(photos)
    neg = rng.integers(0, n - 1, size=len(idx))
    neg = np.where(neg >= idx, neg + 1, neg)
    return photos[neg]
