"""Checkpoint format: exact roundtrip, buffer coverage, corruption
detection, and bit-equal model behavior after reload."""

import numpy as np
import pytest

import promptcd.tensor as T
from promptcd import nn
from promptcd.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from promptcd.errors import CheckpointError
from promptcd.model import ChangeDetector
from promptcd.tensor import Tensor


def small_model(seed=0):
    return ChangeDetector(base=4, adapter_width=8, model_dim=16, heads=2,
                          text_dim=8, text_heads=2, text_layers=1,
                          rng=np.random.default_rng(seed))


class TestRoundtrip:
    def test_parameters_and_buffers_exact(self, tmp_path):
        model = small_model(1)
        path = str(tmp_path / "ck.bin")
        save_checkpoint(path, model)
        stored = read_checkpoint(path)

        names = {n for n, _ in model.named_parameters()}
        buffer_names = {n for n, _ in model.named_buffers()}
        assert set(stored) == names | buffer_names
        for name, param in model.named_parameters():
            np.testing.assert_array_equal(stored[name], param.tensor.data)
        for name, buf in model.named_buffers():
            np.testing.assert_array_equal(stored[name], buf)

    def test_load_restores_exactly(self, tmp_path):
        src = small_model(2)
        path = str(tmp_path / "ck.bin")
        save_checkpoint(path, src)

        dst = small_model(3)  # different init
        before = {n: p.tensor.data.copy() for n, p in dst.named_parameters()}
        changed = any(
            not np.array_equal(before[n], p.tensor.data.copy())
            for n, p in src.named_parameters())
        load_checkpoint(path, dst)
        for (n, p), (_, q) in zip(sorted(src.named_parameters()),
                                  sorted(dst.named_parameters())):
            np.testing.assert_array_equal(p.tensor.data, q.tensor.data)
        for (n, b), (_, c) in zip(sorted(src.named_buffers()),
                                  sorted(dst.named_buffers())):
            np.testing.assert_array_equal(b, c)

    def test_model_outputs_bit_equal_after_reload(self, tmp_path):
        src = small_model(4)
        path = str(tmp_path / "ck.bin")
        save_checkpoint(path, src)
        dst = small_model(5)
        load_checkpoint(path, dst)

        rng = np.random.default_rng(6)
        a = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        b = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        src.eval()
        dst.eval()
        with T.no_grad():
            pa = src(a, b, src.encode_text("building")).final_probability.data
            pb = dst(a, b, dst.encode_text("building")).final_probability.data
        np.testing.assert_array_equal(pa, pb)

    def test_save_is_deterministic(self, tmp_path):
        model = small_model(7)
        p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        save_checkpoint(p1, model)
        save_checkpoint(p2, model)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            assert f1.read() == f2.read()


class TestCorruption:
    def _saved(self, tmp_path):
        model = small_model(8)
        path = str(tmp_path / "ck.bin")
        save_checkpoint(path, model)
        return model, path

    def test_bad_magic(self, tmp_path):
        _, path = self._saved(tmp_path)
        blob = bytearray(open(path, "rb").read())
        blob[0] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_truncated(self, tmp_path):
        _, path = self._saved(tmp_path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        _, path = self._saved(tmp_path)
        with open(path, "ab") as fh:
            fh.write(b"extra")
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_shape_mismatch_on_load(self, tmp_path):
        _, path = self._saved(tmp_path)
        other = ChangeDetector(base=8, adapter_width=8, model_dim=16, heads=2,
                               text_dim=8, text_heads=2, text_layers=1,
                               rng=np.random.default_rng(9))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, other)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_checkpoint(str(tmp_path / "absent.bin"))
