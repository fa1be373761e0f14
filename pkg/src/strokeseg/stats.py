"""Paired comparison of predicted and actual lesion volumes."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import rankdata

EXACT_LIMIT = 25


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class PairedVolumes:
    subject_ids: list[str]
    actual: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        self.subject_ids = [str(s) for s in self.subject_ids]
        self.actual = np.asarray(self.actual, dtype=np.float64)
        self.predicted = np.asarray(self.predicted, dtype=np.float64)
        n = len(self.subject_ids)
        if n < 1:
            raise ValueError("need at least one pair")
        if self.actual.shape != (n,) or self.predicted.shape != (n,):
            raise ValueError("one actual and one predicted volume per subject")
        if (self.actual < 0).any() or (self.predicted < 0).any():
            raise ValueError("volumes must be non-negative")

    def __len__(self) -> int:
        return len(self.subject_ids)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("subject_id", "actual_mm3", "predicted_mm3"))
        for s, a, p in zip(self.subject_ids, self.actual, self.predicted):
            w.writerow((s, repr(float(a)), repr(float(p))))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PairedVolumes":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([r["subject_id"] for r in rows],
                   [float(r["actual_mm3"]) for r in rows],
                   [float(r["predicted_mm3"]) for r in rows])


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str  # "exact", "normal_approx" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


@dataclass(frozen=True)
class PearsonResult:
    r: float
    p_value: float


def lesion_volume(mask, spacing) -> float:
    """Lesion volume in mm^3: voxel count times voxel volume."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask is not binary")
    return float(np.count_nonzero(m)) * float(np.prod(spacing))


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign patterns giving each doubled positive-rank sum.

    Entry ``s`` counts the subsets of ranks whose doubled sum is ``s``, i.e.
    the complete distribution over all ``2**n`` sign assignments.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_differences(d, alternative: str = "two-sided", method: str = "auto") -> WilcoxonResult:
    """Signed-rank test on paired differences.

    Zero differences are dropped, tied magnitudes share average ranks and the
    statistic is the rank sum of the positive differences. ``alternative``
    "greater" tests for positive shift.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    if method not in ("auto", "exact", "normal_approx"):
        raise ValueError(f"unknown method {method!r}")
    d = np.asarray(d, dtype=np.float64).ravel()
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_LIMIT else "normal_approx"

    if method == "exact":
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_counts(doubled)
        total = 2 ** n
        w2 = int(round(2 * w))
        le = sum(counts[: w2 + 1]) / total
        ge = sum(counts[w2:]) / total
        if alternative == "greater":
            p = ge
        elif alternative == "less":
            p = le
        else:
            p = min(1.0, 2 * min(le, ge))
        return WilcoxonResult(w, float(p), n, "exact")

    mu = n * (n + 1) / 4
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float((tie_sizes ** 3 - tie_sizes).sum()) / 48
    sd = math.sqrt(var)
    if alternative == "greater":
        p = _norm_sf((w - mu - 0.5) / sd)
    elif alternative == "less":
        p = _norm_sf((mu - w - 0.5) / sd)
    else:
        z = max(abs(w - mu) - 0.5, 0.0) / sd
        p = min(1.0, 2 * _norm_sf(z))
    return WilcoxonResult(w, float(p), n, "normal_approx")


def wilcoxon_signed_rank(pairs: PairedVolumes, alternative: str = "two-sided",
                         method: str = "auto") -> WilcoxonResult:
    """Test on ``predicted - actual`` volume differences."""
    return wilcoxon_differences(pairs.predicted - pairs.actual, alternative, method)


def pearson_xy(x, y) -> PearsonResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3 or y.size != n:
        raise ValueError("pearson needs at least three pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return PearsonResult(r, 0.0)
    t = r * math.sqrt(df / (1 - r * r))
    # two-sided Student-t tail via the regularized incomplete beta
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return PearsonResult(r, p)


def pearson(pairs: PairedVolumes) -> PearsonResult:
    return pearson_xy(pairs.actual, pairs.predicted)


def box_summary(values) -> tuple[float, float, float, float, float]:
    """(min, q1, median, q3, max) with linearly interpolated quartiles."""
    v = np.asarray(values, dtype=np.float64)
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return tuple(float(x) for x in q)


@dataclass
class VolumeReport:
    model_id: str
    pairs: PairedVolumes
    wilcoxon: WilcoxonResult
    pearson: PearsonResult | None
    actual_box: tuple
    predicted_box: tuple
    notes: list[str] = field(default_factory=list)

    @property
    def scatter(self) -> list[tuple[float, float]]:
        return list(zip(self.pairs.actual.tolist(), self.pairs.predicted.tolist()))


def volume_report(model_id: str, pairs: PairedVolumes, alternative: str = "two-sided") -> VolumeReport:
    notes = []
    try:
        pr = pearson(pairs)
    except UndefinedCorrelationError as e:
        pr = None
        notes.append(f"pearson skipped: {e}")
    except ValueError:
        pr = None
        notes.append(f"pearson skipped: only {len(pairs)} pairs")
    return VolumeReport(model_id, pairs, wilcoxon_signed_rank(pairs, alternative), pr,
                        box_summary(pairs.actual), box_summary(pairs.predicted), notes)


STATS_COLUMNS = ("model_id", "W", "wilcoxon_p", "method", "pearson_r", "pearson_p", "n")


def stats_csv(reports: list[VolumeReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    for r in reports:
        pr = r.pearson
        w.writerow((r.model_id, repr(r.wilcoxon.statistic), repr(r.wilcoxon.p_value), r.wilcoxon.method,
                    "" if pr is None else repr(pr.r), "" if pr is None else repr(pr.p_value), len(r.pairs)))
    return buf.getvalue()


def read_stats_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({
            "model_id": row["model_id"],
            "W": float(row["W"]),
            "wilcoxon_p": float(row["wilcoxon_p"]),
            "method": row["method"],
            "pearson_r": float(row["pearson_r"]) if row["pearson_r"] else None,
            "pearson_p": float(row["pearson_p"]) if row["pearson_p"] else None,
            "n": int(row["n"]),
        })
    return rows


def stats_table(reports: list[VolumeReport]) -> str:
    """Text table: signed-rank statistic and p-value, then Pearson r and p-value."""
    lines = [f"{'Model':<20} {'W+':>10} {'p-value':>10} {'method':>14} {'Pearson r':>10} {'p-value':>10}"]
    for r in reports:
        pr = r.pearson
        rs = "n/a" if pr is None else f"{pr.r:.4f}"
        ps = "n/a" if pr is None else f"{pr.p_value:.4g}"
        lines.append(f"{r.model_id:<20} {r.wilcoxon.statistic:>10.1f} {r.wilcoxon.p_value:>10.4g} "
                     f"{r.wilcoxon.method:>14} {rs:>10} {ps:>10}")
    return "\n".join(lines) + "\n"
