"""Overlap metrics on binary masks and their per-sample report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor

METRIC_NAMES = ("dice", "iou", "precision", "recall")


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class Scores(NamedTuple):
    dice: float
    iou: float
    precision: float
    recall: float


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    """1 where ``p >= threshold``, else 0, as uint8."""
    return (_array(p) >= threshold).astype(np.uint8)


def _check_binary(name: str, a: np.ndarray) -> np.ndarray:
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} mask is not binary")
    return a.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} shapes differ")
    pb = _check_binary("prediction", pred)
    gb = _check_binary("ground truth", gt)
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    return ConfusionCounts(tp, fp, fn, pb.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def scores_from_counts(c: ConfusionCounts) -> Scores:
    if c.tp + c.fp + c.fn == 0:
        # nothing predicted and nothing to find
        return Scores(1.0, 1.0, 1.0, 1.0)
    return Scores(
        _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        _ratio(c.tp, c.tp + c.fp + c.fn),
        _ratio(c.tp, c.tp + c.fp),
        _ratio(c.tp, c.tp + c.fn),
    )


def metrics(pred, gt) -> Scores:
    return scores_from_counts(confusion(pred, gt))


@dataclass
class MetricsReport:
    """Per-sample scores with macro (per-sample mean) aggregates."""

    sample_ids: list[str] = field(default_factory=list)
    rows: list[Scores] = field(default_factory=list)
    volumes: object | None = None  # PairedVolumes for volumetric evaluation

    def add(self, sample_id: str, scores: Scores) -> None:
        self.sample_ids.append(str(sample_id))
        self.rows.append(Scores(*map(float, scores)))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def mean(self) -> Scores:
        if not self.rows:
            raise ValueError("empty report")
        return Scores(*(float(np.mean(self.column(m))) for m in METRIC_NAMES))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sample_id",) + METRIC_NAMES)
        for sid, r in zip(self.sample_ids, self.rows):
            w.writerow([sid] + [repr(v) for v in r])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.DictReader(io.StringIO(text))
        report = cls()
        for row in reader:
            report.add(row["sample_id"], Scores(*(float(row[m]) for m in METRIC_NAMES)))
        return report

    def summary(self, model_id: str) -> str:
        """One table row in Dice, IoU, Precision, Recall order, macro-averaged."""
        m = self.mean()
        header = f"{'Model':<20} {'Dice':>8} {'IoU':>8} {'Precision':>10} {'Recall':>8}  (macro mean, n={len(self)})"
        line = f"{model_id:<20} {m.dice:>8.4f} {m.iou:>8.4f} {m.precision:>10.4f} {m.recall:>8.4f}"
        return header + "\n" + line + "\n"
