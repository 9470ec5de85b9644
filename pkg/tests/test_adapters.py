"""Adapter fusion: parameter budget, temporal weight sharing, fusion
shape, and the temporal-pair shape guard."""

import numpy as np
import pytest

from promptcd.adapters import Adapter, AdapterStack
from promptcd.encoders import FeaturePyramid, ImagePyramidEncoder
from promptcd.errors import TemporalPairError
from promptcd.tensor import Tensor


def make_pyramids(base=8, size=64, seed=0):
    enc = ImagePyramidEncoder(base=base, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    a = Tensor(rng.uniform(0, 1, (2, 3, size, size)).astype(np.float32))
    b = Tensor(rng.uniform(0, 1, (2, 3, size, size)).astype(np.float32))
    return enc(a), enc(b)


class TestAdapter:
    def test_parameter_count_formula(self):
        # conv (width x C_i x 1 x 1) + conv bias (width) + bn gamma/beta (2 * width)
        width, in_ch = 16, 24
        adapter = Adapter(in_ch, width, np.random.default_rng(0))
        actual = sum(p.data.size for p in adapter.parameters())
        assert actual == width * in_ch + width + 2 * width

    def test_stack_parameter_count_per_scale(self):
        base, width = 8, 16
        stack = AdapterStack(base, width, np.random.default_rng(0))
        for scale in range(4):
            in_ch = base * 2**scale
            expected = width * in_ch + width + 2 * width
            assert stack.parameter_count(scale) == expected
            actual = sum(p.data.size
                         for p in getattr(stack, f"scale{scale}").parameters())
            assert actual == expected

    def test_output_is_nonnegative(self):
        # adapter ends in a relu
        adapter = Adapter(8, 4, np.random.default_rng(1))
        adapter.eval()
        x = Tensor(np.random.default_rng(2).standard_normal((2, 8, 5, 5)).astype(np.float32))
        assert adapter(x).data.min() >= 0.0


class TestAdapterStack:
    def test_fused_channels_double_adapter_width(self):
        pyr_a, pyr_b = make_pyramids(base=8)
        stack = AdapterStack(8, 16, np.random.default_rng(3))
        fused = stack(pyr_a, pyr_b)
        assert len(fused) == 4
        for i, f in enumerate(fused):
            assert f.shape[1] == 32  # 2 * width
            assert f.shape[2:] == pyr_a.levels[i].shape[2:]

    def test_temporal_weight_sharing(self):
        """Both dates pass through the same adapter instance per scale:
        identical inputs at both dates produce identical halves."""
        pyr_a, _ = make_pyramids(base=8)
        stack = AdapterStack(8, 16, np.random.default_rng(4))
        stack.eval()
        fused = stack(pyr_a, pyr_a)
        for f in fused:
            np.testing.assert_array_equal(f.data[:, :16], f.data[:, 16:])

    def test_mismatched_pair_rejected(self):
        pyr_a, _ = make_pyramids(base=8, size=64)
        pyr_c, _ = make_pyramids(base=8, size=96)
        stack = AdapterStack(8, 16, np.random.default_rng(5))
        with pytest.raises(TemporalPairError):
            stack(pyr_a, pyr_c)

    def test_wrong_level_count_rejected(self):
        pyr_a, pyr_b = make_pyramids(base=8)
        stack = AdapterStack(8, 16, np.random.default_rng(6))
        with pytest.raises(TemporalPairError):
            stack(FeaturePyramid(pyr_a.levels[:3]), pyr_b)
