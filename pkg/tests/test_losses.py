"""Composite loss: configuration validation, the weight algebra, pinned
hand-worked values, and gradient flow."""

import numpy as np
import pytest

import promptcd.tensor as T
from promptcd.errors import ConfigError
from promptcd.losses import PROB_EPS, LossConfig, bce, dice_loss, iou_loss, total_loss
from promptcd.tensor import Tensor


def probs(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.alpha == 0.2 and cfg.beta == 0.1 and cfg.eps == 1.0

    @pytest.mark.parametrize("kwargs", [
        {"alpha": -0.1},
        {"beta": -0.2},
        {"alpha": 0.7, "beta": 0.3},   # alpha + beta must stay below 1
        {"alpha": 1.2},
        {"eps": 0.0},
        {"eps": -1.0},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)


class TestHandValues:
    """p = [1, 0], y = [1, 1], smoothing 1: worked by hand."""

    def setup_method(self):
        self.p = probs([[[[1.0, 0.0]]]])
        self.y = probs([[[[1.0, 1.0]]]])

    def test_dice(self):
        # 1 - (2*1 + 1) / (1 + 2 + 1) = 0.25
        val = dice_loss(self.p, self.y, eps=1.0)
        np.testing.assert_allclose(val.data, 0.25, atol=1e-7)

    def test_iou(self):
        # 1 - (1 + 1) / (1 + 2 - 1 + 1) = 1/3
        val = iou_loss(self.p, self.y, eps=1.0)
        np.testing.assert_allclose(val.data, 1.0 / 3.0, atol=1e-7)


class TestBce:
    def test_matches_manual_mean(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, (2, 1, 4, 4)).astype(np.float32)
        y = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(np.float32)
        expect = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        got = bce(probs(p), probs(y))
        np.testing.assert_allclose(got.data, expect, rtol=1e-5)

    def test_extreme_probabilities_stay_finite(self):
        p = probs([[[[0.0, 1.0]]]])
        y = probs([[[[1.0, 0.0]]]])
        val = bce(p, y).data
        assert np.isfinite(val)
        # clamp floor implies the ceiling on per-pixel loss is -log(eps)
        assert val <= -np.log(PROB_EPS) + 1e-5


class TestTotalLoss:
    def _six(self, p):
        return [probs(p) for _ in range(6)]

    def test_weights_sum_to_one_at_defaults(self):
        """total = (1-a-b)*ce + a*iou + b*dice averaged over maps; with a
        single-map check against the three parts."""
        rng = np.random.default_rng(1)
        p = rng.uniform(0.1, 0.9, (1, 1, 8, 8)).astype(np.float32)
        y = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(np.float32)
        maps = self._six(p)
        total, parts = total_loss(maps, probs(y))
        manual = 0.7 * parts["ce"] + 0.2 * parts["iou"] + 0.1 * parts["dice"]
        np.testing.assert_allclose(total.data, manual, rtol=1e-6)

    def test_pure_ce_when_alpha_beta_zero(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.1, 0.9, (1, 1, 8, 8)).astype(np.float32)
        y = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(np.float32)
        cfg = LossConfig(alpha=0.0, beta=0.0)
        total, parts = total_loss(self._six(p), probs(y), cfg)
        np.testing.assert_allclose(total.data, parts["ce"], atol=1e-7)
        np.testing.assert_allclose(total.data, bce(probs(p), probs(y)).data, atol=1e-7)

    def test_maps_averaged_equally(self):
        rng = np.random.default_rng(3)
        y = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(np.float32)
        maps = [probs(rng.uniform(0.1, 0.9, (1, 1, 4, 4)).astype(np.float32))
                for _ in range(6)]
        total, _ = total_loss(maps, probs(y))
        singles = [total_loss([m] * 6, probs(y))[0].data for m in maps]
        np.testing.assert_allclose(total.data, np.mean(singles), rtol=1e-5)

    def test_gradient_reaches_every_map(self):
        rng = np.random.default_rng(4)
        y = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(np.float32)
        maps = [probs(rng.uniform(0.2, 0.8, (1, 1, 4, 4)).astype(np.float32))
                for _ in range(6)]
        for m in maps:
            m.requires_grad = True
        total, _ = total_loss(maps, probs(y))
        T.backward(total)
        for m in maps:
            assert m.grad is not None
            assert np.abs(m.grad).max() > 0

    def test_perfect_prediction_near_floor(self):
        y = (np.arange(16).reshape(1, 1, 4, 4) % 2).astype(np.float32)
        total, parts = total_loss(self._six(y.copy()), probs(y))
        # CE at the clamp floor, overlap terms only smoothing-limited
        assert parts["ce"] < 1e-5
        assert total.data < 0.02
