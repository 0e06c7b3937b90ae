"""Generator losses, discriminator, distillation, and the joint loop."""

import numpy as np
import pytest

from sketchlab import autodiff as ad
from sketchlab.autodiff import Tensor, grad_check
from sketchlab.models import RasterEncoder, canvas_batch
from sketchlab.optim import Adam
from sketchlab.ranking import triplet_loss
from sketchlab.semisup import (JointConfig, PairDiscriminator,
                               PhotoToSketchGenerator, discriminator_loss,
                               generator_reward, gmm_step_nll, joint_train,
                               kd_relative, kl_to_standard_normal, offsets_batch,
                               pair_distance, pretrain_generator,
                               reinforce_generator_update, semisup_retrieval_loss,
                               sequence_nll, vae_loss, weighted_triplet)
from sketchlab.sketch import rasterize
from sketchlab.synthetic import gen_synthetic_dataset


def const_params(pi, mu_x, mu_y, sx, sy, rho, pen_logits):
    return {"pi": Tensor(pi), "mu_x": Tensor(mu_x), "mu_y": Tensor(mu_y),
            "sigma_x": Tensor(sx), "sigma_y": Tensor(sy), "rho": Tensor(rho),
            "pen_logits": Tensor(pen_logits)}


class TestGmmNll:
    def test_single_component_at_mean_with_exact_pen(self):
        p = const_params([[1.0]], [[0.3]], [[0.1]], [[1.0]], [[1.0]], [[0.0]],
                         [[60.0, 0.0, 0.0]])
        nll = gmm_step_nll(np.array([[0.3, 0.1]]), np.array([[1.0, 0.0, 0.0]]), p)
        assert nll.data[0] == pytest.approx(np.log(2 * np.pi), abs=1e-9)

    def test_uniform_pen_logits_cost_ln3(self):
        p = const_params([[1.0]], [[0.0]], [[0.0]], [[1.0]], [[1.0]], [[0.0]],
                         [[0.7, 0.7, 0.7]])
        nll = gmm_step_nll(np.array([[0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]), p)
        pen_part = nll.data[0] - np.log(2 * np.pi)
        assert pen_part == pytest.approx(np.log(3.0), abs=1e-12)

    def test_mixture_density_integrates_to_one(self):
        # grid quadrature over [mu +- 5 sigma]^2 for random parameter draws
        r = np.random.default_rng(0)
        for _ in range(5):
            m = 3
            pi = r.dirichlet(np.ones(m))
            mu_x, mu_y = r.uniform(-0.5, 0.5, (2, m))
            sx, sy = r.uniform(0.05, 0.3, (2, m))
            rho = r.uniform(-0.7, 0.7, m)
            p = const_params(pi[None], mu_x[None], mu_y[None], sx[None],
                             sy[None], rho[None], [[0.0, 0.0, 0.0]])
            lo_x, hi_x = (mu_x - 5 * sx).min(), (mu_x + 5 * sx).max()
            lo_y, hi_y = (mu_y - 5 * sy).min(), (mu_y + 5 * sy).max()
            xs = np.linspace(lo_x, hi_x, 200)
            ys = np.linspace(lo_y, hi_y, 200)
            gx, gy = np.meshgrid(xs, ys)
            from sketchlab.models import gmm_mixture_log_density
            pts = gx.size
            dens = np.exp(gmm_mixture_log_density(
                gx.reshape(pts, 1), gy.reshape(pts, 1),
                const_params(np.tile(pi, (pts, 1)), np.tile(mu_x, (pts, 1)),
                             np.tile(mu_y, (pts, 1)), np.tile(sx, (pts, 1)),
                             np.tile(sy, (pts, 1)), np.tile(rho, (pts, 1)),
                             np.zeros((pts, 3)))).data)
            integral = dens.sum() * (xs[1] - xs[0]) * (ys[1] - ys[0])
            assert integral == pytest.approx(1.0, abs=1e-2)


class TestVaeLoss:
    def test_kl_zero_at_standard_normal(self):
        kl = kl_to_standard_normal(Tensor(np.zeros((1, 4))), Tensor(np.ones((1, 4))))
        assert kl.data[0] == pytest.approx(0.0, abs=1e-12)

    def test_kl_half_for_unit_mean(self):
        kl = kl_to_standard_normal(Tensor([[1.0]]), Tensor([[1.0]]))
        assert kl.data[0] == pytest.approx(0.5)

    def test_kl_nonnegative_random(self):
        r = np.random.default_rng(1)
        mu = Tensor(r.standard_normal((8, 5)))
        sigma = Tensor(r.uniform(0.2, 3.0, (8, 5)))
        assert np.all(kl_to_standard_normal(mu, sigma).data >= 0.0)

    def test_zero_weight_reduces_to_reconstruction(self):
        recon = Tensor(2.5)
        kl = Tensor(1.0)
        assert vae_loss(recon, kl, 0.0).item() == pytest.approx(2.5)


class TestGlimpse:
    def test_attention_sums_to_one(self):
        gen = PhotoToSketchGenerator(channels=16, latent=8, hidden=12,
                                     mixtures=3, att_dim=6, seed=0)
        canv = np.random.default_rng(2).random((2, 32, 32))
        grid_feat = gen.feature_grid(canv)
        unfolded = gen._unfolded(grid_feat)
        h = Tensor(np.zeros((2, 12)))
        _, alpha = gen.glimpse(grid_feat, unfolded, h)
        assert np.abs(alpha.data.sum(axis=1) - 1.0).max() < 1e-9

    def test_zero_score_weights_give_spatial_mean(self):
        gen = PhotoToSketchGenerator(channels=16, latent=8, hidden=12,
                                     mixtures=3, att_dim=6, seed=1)
        gen.params["att_score_w"].data[:] = 0.0
        canv = np.random.default_rng(3).random((1, 32, 32))
        grid_feat = gen.feature_grid(canv)
        g, _ = gen.glimpse(grid_feat, gen._unfolded(grid_feat), Tensor(np.zeros((1, 12))))
        assert np.allclose(g.data[0], grid_feat.data[0].mean(axis=0), atol=1e-12)

    def test_single_cell_grid_returns_that_cell(self):
        gen = PhotoToSketchGenerator(grid=1, channels=8, latent=4, hidden=6,
                                     mixtures=2, att_dim=4, seed=2)
        canv = np.random.default_rng(4).random((1, 32, 32))
        grid_feat = gen.feature_grid(canv)
        g, alpha = gen.glimpse(grid_feat, gen._unfolded(grid_feat),
                               Tensor(np.zeros((1, 6))))
        assert alpha.data[0, 0] == pytest.approx(1.0)
        assert np.allclose(g.data[0], grid_feat.data[0, 0], atol=1e-12)


class TestDiscriminator:
    def test_half_scores_cost_ln2_per_pair(self):
        loss = discriminator_loss(Tensor(np.full(4, 0.5)), Tensor(np.full(4, 0.5)))
        assert loss.item() == pytest.approx(2 * np.log(2.0), abs=1e-7)

    def test_perfect_discriminator_near_zero(self):
        loss = discriminator_loss(Tensor(np.full(3, 1.0 - 1e-9)),
                                  Tensor(np.full(3, 1e-9)))
        assert loss.item() < 1e-8

    def test_batch_order_symmetry(self):
        r = np.random.default_rng(5)
        real = r.uniform(0.3, 0.9, 6)
        fake = r.uniform(0.1, 0.7, 6)
        l1 = discriminator_loss(Tensor(real), Tensor(fake)).item()
        l2 = discriminator_loss(Tensor(real[::-1].copy()), Tensor(fake[::-1].copy())).item()
        assert l1 == pytest.approx(l2)

    def test_scores_bounded(self):
        disc = PairDiscriminator(seed=3)
        r = np.random.default_rng(6)
        s = disc.score(r.random((4, 32, 32)), r.random((4, 32, 32))).data
        assert np.all((s > 0) & (s < 1))


class TestKdRelative:
    def test_student_equals_teacher_gives_zero(self):
        enc = RasterEncoder(seed=4)
        r = np.random.default_rng(7)
        photos, sketches = r.random((3, 32, 32)), r.random((3, 32, 32))
        assert kd_relative(enc, enc, photos, sketches).item() == pytest.approx(0.0, abs=1e-12)

    def test_scalar_example(self):
        from sketchlab.semisup import abs_diff
        assert abs_diff(Tensor([0.6]), np.array([0.4])).data[0] == pytest.approx(0.2)

    def test_invariant_to_common_rotation(self):
        enc = RasterEncoder(seed=5)
        rot_enc = enc.clone()
        r = np.random.default_rng(8)
        q, _ = np.linalg.qr(r.standard_normal((64, 64)))
        rot_enc.params["proj_w"].data = enc.params["proj_w"].data @ q
        rot_enc.params["proj_b"].data = enc.params["proj_b"].data @ q
        photos, sketches = r.random((4, 32, 32)), r.random((4, 32, 32))
        d1 = pair_distance(enc, photos, sketches).data
        d2 = pair_distance(rot_enc, photos, sketches).data
        assert np.allclose(d1, d2, atol=1e-9)


class TestSemisupLoss:
    def setup_method(self):
        self.enc = RasterEncoder(seed=6)
        self.teacher = self.enc.clone()
        r = np.random.default_rng(9)
        mk = lambda: {"anchors": r.random((4, 32, 32)),
                      "positives": r.random((4, 32, 32)),
                      "negatives": r.random((4, 32, 32))}
        self.lab, self.pseudo = mk(), mk()

    def _loss(self, w, kd):
        return semisup_retrieval_loss(self.enc, self.teacher, self.lab,
                                      self.pseudo, w, kd_weight=kd).item()

    def test_zero_weight_leaves_only_kd_for_pseudo(self):
        w0 = np.zeros(4)
        lab_only = weighted_triplet(self.enc, self.lab["anchors"],
                                    self.lab["positives"], self.lab["negatives"],
                                    0.3).item()
        assert self._loss(w0, 0.0) == pytest.approx(lab_only, abs=1e-12)

    def test_unit_weight_no_kd_is_plain_sum(self):
        w1 = np.ones(4)
        lab = weighted_triplet(self.enc, self.lab["anchors"],
                               self.lab["positives"], self.lab["negatives"], 0.3).item()
        pse = weighted_triplet(self.enc, self.pseudo["anchors"],
                               self.pseudo["positives"], self.pseudo["negatives"], 0.3).item()
        assert self._loss(w1, 0.0) == pytest.approx(lab + pse, abs=1e-12)

    def test_half_weight_halves_pseudo_term(self):
        full = self._loss(np.ones(4), 0.0)
        none = self._loss(np.zeros(4), 0.0)
        half = self._loss(np.full(4, 0.5), 0.0)
        assert half - none == pytest.approx(0.5 * (full - none), abs=1e-12)


class TestGeneratorReward:
    def test_perfect_pair_scores_r2(self):
        class StubEnc:
            def embed(self, canvases):
                e = np.zeros((len(canvases), 4))
                e[0, 0] = 1.0  # sketch
                e[1, 0] = 1.0  # photo identical
                e[2, 1] = 1.0  # negative far away
                return Tensor(e)

        class StubDisc:
            def score(self, p, s):
                return Tensor(np.array([1.0]))

        r = generator_reward(StubEnc(), StubDisc(), np.zeros((8, 8)),
                             np.zeros((8, 8)), np.zeros((8, 8)))
        assert r == pytest.approx(1.0)

    def test_r2_zero_reduces_to_negative_triplet(self):
        enc = RasterEncoder(seed=7)
        disc = PairDiscriminator(seed=8)
        rng = np.random.default_rng(10)
        p, s, n = rng.random((3, 32, 32))
        r = generator_reward(enc, disc, p, s, n, r2=0.0)
        with ad.no_grad():
            emb = enc.embed(np.stack([s, p, n])).data
        assert r == pytest.approx(-triplet_loss(emb[0], emb[1], emb[2], 0.3))

    def test_reward_rises_as_sketch_approaches_photo(self):
        ds = gen_synthetic_dataset(500, 2, 2, 0)
        enc = RasterEncoder(seed=9)
        disc = PairDiscriminator(seed=10)
        photo = ds[0].photo.intensities
        true_sketch = rasterize(ds[0].sketch, 32, 32).intensities
        other = rasterize(ds[3].sketch, 32, 32).intensities
        r_match = generator_reward(enc, disc, photo, photo.copy(), other)
        r_far = generator_reward(enc, disc, photo, other, photo.copy())
        assert r_match > r_far


class TestReinforceUpdate:
    def _tiny_gen(self, seed=11):
        return PhotoToSketchGenerator(channels=8, latent=4, hidden=6, mixtures=2,
                                      att_dim=4, max_len=6, seed=seed)

    def test_zero_reward_equals_pure_vae_step(self):
        ds = gen_synthetic_dataset(501, 2, 2, 0)
        photos = canvas_batch([i.photo for i in ds])
        targets, lengths = offsets_batch([i.sketch for i in ds], 6)

        def run(with_pg):
            gen = self._tiny_gen()
            opt = Adam(gen.params, lr=1e-2)
            rng = np.random.default_rng(3)
            sketches, rows, lps = gen.sample_sketches(photos, rng)
            nll, kl = sequence_nll(gen, photos, targets, lengths)
            vae = vae_loss(nll, kl)
            if with_pg:
                reinforce_generator_update(gen, lps, np.zeros(len(photos)), opt,
                                           vae_term=vae)
            else:
                opt.zero_grad()
                vae.backward()
                opt.step()
            return gen.state_arrays()

        a, b = run(True), run(False)
        assert all(np.allclose(a[k], b[k], atol=1e-12) for k in a)

    def test_policy_gradient_touches_only_final_layer(self):
        gen = self._tiny_gen(seed=12)
        before = gen.state_arrays()
        ds = gen_synthetic_dataset(502, 2, 1, 0)
        photos = canvas_batch([i.photo for i in ds])
        rng = np.random.default_rng(4)
        _, _, lps = gen.sample_sketches(photos, rng)
        opt = Adam(gen.params, lr=1e-2)
        reinforce_generator_update(gen, lps, np.ones(len(photos)), opt)
        after = gen.state_arrays()
        for k in before:
            if k in ("dec_out_w", "dec_out_b"):
                assert not np.allclose(before[k], after[k])
            else:
                assert np.array_equal(before[k], after[k]), k

    def test_surrogate_gradient_matches_finite_differences(self):
        # freeze one sampled row sequence, then check d/dW_y of the
        # -(mean logprob * R) surrogate by central differences
        from sketchlab.semisup import gmm_step_nll
        gen = self._tiny_gen(seed=13)
        ds = gen_synthetic_dataset(503, 1, 2, 0)
        photos = canvas_batch([i.photo for i in ds])
        rewards = np.array([0.7, -0.4])
        _, rows, _ = gen.sample_sketches(photos, np.random.default_rng(6))

        def surrogate(*params):
            step_params, _, _ = gen.teacher_forced_params(photos, rows)
            total = None
            for t, sp in enumerate(step_params):
                lp = ad.mul(gmm_step_nll(rows[:, t, 0:2], rows[:, t, 2:5], sp), -1.0)
                term = ad.mul(lp, rewards)
                total = term if total is None else ad.add(total, term)
            return ad.mul(ad.mean(total), -1.0)

        err = grad_check(surrogate, [gen.params["dec_out_w"],
                                     gen.params["dec_out_b"]])
        assert err < 1e-4


class TestJointTrain:
    def test_zero_rounds_leaves_models_unchanged(self):
        ds = gen_synthetic_dataset(504, 2, 4, 0)
        enc = RasterEncoder(seed=14)
        gen = PhotoToSketchGenerator(channels=8, latent=4, hidden=6, mixtures=2,
                                     att_dim=4, max_len=8, seed=15)
        disc = PairDiscriminator(seed=16)
        snap = {"enc": enc.state_arrays(), "gen": gen.state_arrays(),
                "disc": disc.state_arrays()}
        joint_train(ds[:4], ds[4:], enc, gen, disc, rounds=0)
        assert all(np.array_equal(snap["enc"][k], enc.state_arrays()[k])
                   for k in snap["enc"])
        assert all(np.array_equal(snap["gen"][k], gen.state_arrays()[k])
                   for k in snap["gen"])

    def test_short_joint_run_produces_diagnostics(self):
        ds = gen_synthetic_dataset(505, 3, 4, 0)
        labelled, unlabelled = ds[:6], ds[6:]
        enc = RasterEncoder(seed=17)
        gen = PhotoToSketchGenerator(channels=16, latent=8, hidden=12, mixtures=3,
                                     att_dim=6, max_len=12, seed=18)
        disc = PairDiscriminator(seed=19)
        cfg = JointConfig(k_retrieval=2, k_generator=1, batch_size=4)
        diag = joint_train(labelled, unlabelled, enc, gen, disc, cfg, rounds=2,
                           seed=20)
        assert len(diag["disc_real"]) == 2
        assert all(np.isfinite(v) for v in diag["f_loss"])
        assert all(np.isfinite(v) for v in diag["g_pg"])


class TestGeneratorPlumbing:
    def test_offsets_batch_shapes(self):
        ds = gen_synthetic_dataset(506, 2, 2, 0)
        rows, lengths = offsets_batch([i.sketch for i in ds], 50)
        assert rows.shape[0] == 4 and rows.shape[2] == 5
        assert lengths.max() <= rows.shape[1]

    def test_greedy_sampling_is_deterministic(self):
        gen = PhotoToSketchGenerator(channels=8, latent=4, hidden=6, mixtures=2,
                                     att_dim=4, max_len=10, seed=21)
        ds = gen_synthetic_dataset(507, 1, 1, 0)
        photos = canvas_batch([ds[0].photo])
        r1 = gen.sample_sketches(photos, np.random.default_rng(0), greedy=True)[1]
        r2 = gen.sample_sketches(photos, np.random.default_rng(99), greedy=True)[1]
        assert np.array_equal(r1, r2)

    def test_pretrain_generator_reduces_loss(self):
        ds = gen_synthetic_dataset(508, 2, 3, 0)
        gen = PhotoToSketchGenerator(channels=16, latent=8, hidden=16, mixtures=3,
                                     att_dim=8, max_len=40, seed=22)
        losses = pretrain_generator(gen, ds, epochs=8, lr=3e-3, seed=23)
        assert losses[-1] < losses[0]
