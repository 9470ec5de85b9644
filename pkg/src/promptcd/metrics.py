"""Binary change-detection metrics from pixel confusion counts.

Counts accumulate across samples and datasets (micro-averaging); the
derived metrics treat every 0/0 ratio as 0.0 and flag the result as
degenerate so callers can tell an earned zero from an undefined one.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

METRIC_NAMES = ("Pre", "Rec", "F1", "IoU", "OA")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, target):
    """Confusion counts for binary arrays of identical shape; raises
    UsageError on shape mismatch or non-binary values."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise UsageError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    for name, arr in (("prediction", p), ("target", t)):
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise UsageError(f"{name} must be binary, found values {vals[:8]}")
    p = p.astype(bool)
    t = t.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def _ratio(num, den):
    if den == 0:
        return 0.0, True
    return num / den, False


def metrics(counts):
    """Precision, recall, F1, IoU and overall accuracy as fractions in
    [0, 1], plus a "degenerate" flag set when any ratio was 0/0."""
    pre, d1 = _ratio(counts.tp, counts.tp + counts.fp)
    rec, d2 = _ratio(counts.tp, counts.tp + counts.fn)
    f1, d3 = _ratio(2.0 * pre * rec, pre + rec)
    iou, d4 = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    oa, d5 = _ratio(counts.tp + counts.tn, counts.total)
    return {
        "Pre": pre, "Rec": rec, "F1": f1, "IoU": iou, "OA": oa,
        "degenerate": d1 or d2 or d3 or d4 or d5,
    }


def format_metrics_csv(rows):
    """Render metric rows as CSV text, values as percentages with two
    decimals.  Each row is (dataset, prompt, metrics_dict)."""
    lines = ["dataset,prompt," + ",".join(METRIC_NAMES)]
    for dataset, prompt, m in rows:
        cells = [f"{100.0 * m[name]:.2f}" for name in METRIC_NAMES]
        lines.append(f"{dataset},{prompt}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_metrics_csv(rows))
