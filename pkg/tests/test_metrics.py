"""Binary change metrics against a brute-force oracle, the F1/IoU
identity, degenerate handling, and the CSV report format."""

import numpy as np
import pytest

from promptcd.errors import UsageError
from promptcd.metrics import (
    ConfusionCounts,
    confusion,
    format_metrics_csv,
    metrics,
)


def brute_force(pred, ref):
    tp = fp = fn = tn = 0
    for p, r in zip(pred.ravel().tolist(), ref.ravel().tolist()):
        if p == 1 and r == 1:
            tp += 1
        elif p == 1 and r == 0:
            fp += 1
        elif p == 0 and r == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


class TestConfusion:
    def test_counts_match_brute_force_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            pred = (rng.uniform(size=(16, 16)) > rng.uniform(0.1, 0.9)).astype(np.int64)
            ref = (rng.uniform(size=(16, 16)) > rng.uniform(0.1, 0.9)).astype(np.int64)
            c = confusion(pred, ref)
            assert (c.tp, c.fp, c.fn, c.tn) == brute_force(pred, ref)

    def test_addition_accumulates(self):
        a = ConfusionCounts(tp=1, fp=2, fn=3, tn=4)
        b = ConfusionCounts(tp=10, fp=20, fn=30, tn=40)
        s = a + b
        assert (s.tp, s.fp, s.fn, s.tn) == (11, 22, 33, 44)

    def test_shape_mismatch_raises(self):
        with pytest.raises(UsageError):
            confusion(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_non_binary_raises(self):
        bad = np.array([[0, 2], [1, 0]])
        ok = np.array([[0, 1], [1, 0]])
        with pytest.raises(UsageError):
            confusion(bad, ok)
        with pytest.raises(UsageError):
            confusion(ok, bad)


class TestMetrics:
    def _random_counts(self, rng):
        pred = (rng.uniform(size=(16, 16)) > rng.uniform(0.1, 0.9)).astype(np.int64)
        ref = (rng.uniform(size=(16, 16)) > rng.uniform(0.1, 0.9)).astype(np.int64)
        return confusion(pred, ref)

    def test_values_match_definitions(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            c = self._random_counts(rng)
            m = metrics(c)
            tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
            if tp + fp:
                np.testing.assert_allclose(m["Pre"], tp / (tp + fp), rtol=1e-12)
            if tp + fn:
                np.testing.assert_allclose(m["Rec"], tp / (tp + fn), rtol=1e-12)
            if tp + fp + fn:
                np.testing.assert_allclose(m["IoU"], tp / (tp + fp + fn), rtol=1e-12)
            np.testing.assert_allclose(m["OA"], (tp + tn) / (tp + fp + fn + tn), rtol=1e-12)

    def test_f1_identity_with_iou(self):
        """F1 and IoU are linked exactly: F1 = 2 IoU / (1 + IoU)."""
        rng = np.random.default_rng(13)
        for _ in range(100):
            m = metrics(self._random_counts(rng))
            np.testing.assert_allclose(m["F1"], 2 * m["IoU"] / (1 + m["IoU"]), atol=1e-12)

    def test_degenerate_zero_over_zero(self):
        m = metrics(ConfusionCounts(tp=0, fp=0, fn=0, tn=8))
        assert m["Pre"] == 0.0 and m["Rec"] == 0.0 and m["F1"] == 0.0 and m["IoU"] == 0.0
        assert m["degenerate"] is True
        assert m["OA"] == 1.0

    def test_not_degenerate_with_signal(self):
        m = metrics(ConfusionCounts(tp=4, fp=1, fn=1, tn=10))
        assert m["degenerate"] is False

    def test_micro_average_pools_counts(self):
        """Micro averaging sums confusion counts before computing rates,
        so two tiles together equal their pooled counts."""
        rng = np.random.default_rng(17)
        a = self._random_counts(rng)
        b = self._random_counts(rng)
        pooled = metrics(a + b)
        tp = a.tp + b.tp
        fp = a.fp + b.fp
        np.testing.assert_allclose(pooled["Pre"], tp / (tp + fp), rtol=1e-12)


class TestCsv:
    def test_format(self):
        rows = [("val", "building", metrics(ConfusionCounts(tp=50, fp=25, fn=10, tn=915)))]
        text = format_metrics_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == "dataset,prompt,Pre,Rec,F1,IoU,OA"
        cells = lines[1].split(",")
        assert cells[0] == "val" and cells[1] == "building"
        # percentages with two decimals
        np.testing.assert_allclose(float(cells[2]), 100 * 50 / 75, atol=0.005)
        np.testing.assert_allclose(float(cells[3]), 100 * 50 / 60, atol=0.005)
        for cell in cells[2:]:
            whole, frac = cell.split(".")
            assert len(frac) == 2

    def test_multiple_rows_in_order(self):
        m = metrics(ConfusionCounts(tp=1, fp=1, fn=1, tn=1))
        text = format_metrics_csv([("d", "a", m), ("d", "b", m)])
        lines = text.strip().split("\n")
        assert len(lines) == 3
        assert lines[1].startswith("d,a,") and lines[2].startswith("d,b,")
