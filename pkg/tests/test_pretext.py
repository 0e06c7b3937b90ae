"""Cross-modal pretext losses, training plumbing, and linear evaluation."""

import numpy as np
import pytest

from sketchlab.autodiff import Tensor
from sketchlab.pretext import (PretextConfig, PretextView, RasterToVector,
                               VectorToRaster, encode_features, greedy_vector_decode,
                               linear_eval, pretext_views, pretrain,
                               rasterization_loss, rows_batch_of,
                               vectorization_loss)
from sketchlab.synthetic import gen_synthetic_dataset

TINY = PretextConfig(task="vectorization", height=16, width=16, grid=2,
                     channels=12, latent=10, hidden=12, max_len=30)


def one_hot_rows(coords, pens):
    rows = np.zeros((1, len(coords), 5))
    for t, ((x, y), pen) in enumerate(zip(coords, pens)):
        rows[0, t, 0], rows[0, t, 1] = x, y
        rows[0, t, 2 + pen] = 1.0
    return rows


class TestVectorizationLoss:
    def test_perfect_prediction_tends_to_zero(self):
        target = one_hot_rows([(0.2, 0.3), (0.4, 0.5)], [0, 2])
        pred = target.copy()
        pred[:, :, 2:5] = pred[:, :, 2:5] * 80.0  # saturated pen logits
        total, _, _ = vectorization_loss(Tensor(pred), target)
        assert total.item() < 1e-9

    def test_coordinate_offset_squared(self):
        target = one_hot_rows([(0.5, 0.5)], [2])
        pred = target.copy()
        pred[0, 0, 0] += 0.1
        pred[:, :, 2:5] *= 80.0
        total, coord, pen = vectorization_loss(Tensor(pred), target)
        assert coord.item() == pytest.approx(0.01, abs=1e-12)

    def test_uniform_pen_logits_cost_ln3(self):
        target = one_hot_rows([(0.1, 0.1), (0.2, 0.2), (0.3, 0.3)], [0, 0, 2])
        pred = target.copy()
        pred[:, :, 2:5] = 0.0
        _, _, pen = vectorization_loss(Tensor(pred), target)
        assert pen.item() == pytest.approx(np.log(3.0), abs=1e-12)

    def test_additive_decomposition(self):
        r = np.random.default_rng(0)
        target = one_hot_rows([(0.1, 0.9), (0.8, 0.2)], [0, 2])
        pred = Tensor(r.standard_normal((1, 2, 5)))
        total, coord, pen = vectorization_loss(pred, target)
        assert total.item() == pytest.approx(coord.item() + pen.item(), abs=1e-12)

    def test_length_mismatch_rejected(self):
        target = one_hot_rows([(0.1, 0.1)], [2])
        with pytest.raises(ValueError):
            vectorization_loss(Tensor(np.zeros((1, 3, 5))), target)


class TestRasterizationLoss:
    def test_identical_canvases_zero(self):
        c = np.random.default_rng(1).random((1, 8, 8))
        assert rasterization_loss(Tensor(c), c).item() == 0.0

    def test_full_contrast_is_one(self):
        a = np.zeros((1, 8, 8))
        b = np.ones((1, 8, 8))
        assert rasterization_loss(Tensor(a), b).item() == pytest.approx(1.0)

    def test_half_pixels_off_by_half(self):
        a = np.zeros((1, 4, 4))
        b = np.zeros((1, 4, 4))
        b[0, :2, :] = 0.5
        assert rasterization_loss(Tensor(a), b).item() == pytest.approx(0.125)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            rasterization_loss(Tensor(np.zeros((1, 8, 8))), np.zeros((1, 4, 4)))


class TestPretrain:
    def _views(self, n_classes=2, n_inst=3, seed=600):
        ds = gen_synthetic_dataset(seed, n_classes, n_inst, 0, height=16, width=16)
        return pretext_views(ds, 16, 16, TINY.max_len), ds

    def test_view_layer_exposes_no_labels(self):
        views, _ = self._views()
        v = views[0]
        assert not hasattr(v, "class_id") and not hasattr(v, "instance_id")
        assert set(v.__dataclass_fields__) == {"canvas", "rows"}

    def test_zero_epochs_returns_random_encoder(self):
        views, _ = self._views()
        model, losses = pretrain(views, TINY, epochs=0, seed=3)
        fresh = RasterToVector(TINY, seed=3)
        assert losses == []
        assert all(np.array_equal(model.params[k].data, fresh.params[k].data)
                   for k in model.params)

    def test_vectorization_loss_trend_over_smoothing_window(self):
        views, _ = self._views()
        _, losses = pretrain(views, TINY, epochs=50, lr=3e-3, seed=4)
        window = len(losses) // 2
        assert np.mean(losses[-window:]) <= np.mean(losses[:window])

    def test_encoder_output_dimension_matches_config(self):
        views, ds = self._views()
        model, _ = pretrain(views, TINY, epochs=1, seed=5)
        feats = encode_features(model, ds, TINY)
        assert feats.shape == (len(ds), TINY.latent)

    def test_rasterization_task_trains(self):
        cfg = PretextConfig(task="rasterization", height=16, width=16, grid=2,
                            channels=12, latent=10, hidden=12, max_len=30)
        views, ds = self._views()
        model, losses = pretrain(views, cfg, epochs=5, lr=3e-3, seed=6)
        assert isinstance(model, VectorToRaster)
        assert losses[-1] <= losses[0]
        feats = encode_features(model, ds, cfg)
        assert feats.shape == (len(ds), cfg.latent)

    def test_greedy_decode_terminates(self):
        views, ds = self._views()
        model, _ = pretrain(views, TINY, epochs=2, seed=7)
        sketch, rows = greedy_vector_decode(model, views[0].canvas)
        assert len(rows) <= TINY.max_len
        if len(rows) < TINY.max_len:  # stopped early: must be the end state
            assert np.argmax(rows[-1, 2:5]) == 2


class TestLinearEval:
    def test_single_class_data_perfect(self):
        ds = gen_synthetic_dataset(601, 1, 8, 0, height=16, width=16)
        model = RasterToVector(TINY, seed=8)
        out = linear_eval(model, ds, TINY, epochs=30, seed=9)
        assert out["top1"] == 1.0

    def test_accuracy_bounds_and_counts(self):
        ds = gen_synthetic_dataset(602, 3, 6, 0, height=16, width=16)
        model = RasterToVector(TINY, seed=10)
        out = linear_eval(model, ds, TINY, epochs=20, seed=11, train_fraction=0.5)
        assert 0.0 <= out["top1"] <= 1.0 and 0.0 <= out["top5"] <= 1.0
        assert out["n_train"] + out["n_eval"] == len(ds)

    def test_fraction_validation(self):
        ds = gen_synthetic_dataset(603, 2, 2, 0, height=16, width=16)
        with pytest.raises(ValueError):
            linear_eval(RasterToVector(TINY, seed=12), ds, TINY, train_fraction=0.0)


class TestRowsBatch:
    def test_padding_marks_end_state(self):
        ds = gen_synthetic_dataset(604, 2, 2, 0, height=16, width=16)
        views = pretext_views(ds, 16, 16, 20)
        rows, lengths = rows_batch_of(views, 20)
        for i, ln in enumerate(lengths):
            if ln < rows.shape[1]:
                assert np.all(rows[i, ln:, 4] == 1.0)
