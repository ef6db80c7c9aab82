"""Binary classification metrics with label 1 (suicide) as the positive class."""
from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

METRICS = ("accuracy", "precision", "recall", "f1", "auc")
COLUMN_TITLES = ("Accuracy (%)", "Precision (%)", "Recall (%)", "F1 Score (%)", "AUC (%)")


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float] = None
    degenerate: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["accuracy"], d["precision"], d["recall"], d["f1"], d.get("auc"),
                   tuple(d.get("degenerate", ())))


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} contains values other than 0 and 1")
    return arr.astype(np.int64)


def confusion(predicted, labels) -> ConfusionCounts:
    pred = _binary(predicted, "predicted")
    true = _binary(labels, "labels")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise ValueError("confusion needs at least one prediction")
    return ConfusionCounts(
        tp=int(((pred == 1) & (true == 1)).sum()),
        fp=int(((pred == 1) & (true == 0)).sum()),
        fn=int(((pred == 0) & (true == 1)).sum()),
        tn=int(((pred == 0) & (true == 0)).sum()),
    )


def derive(c: ConfusionCounts) -> MetricReport:
    """Accuracy, precision, recall and F1; a zero denominator gives 0.0 and a flag."""
    if c.total <= 0:
        raise ValueError("no records counted")
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return MetricReport((c.tp + c.tn) / c.total, precision, recall, f1, None, tuple(flags))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by a sorted sweep over distinct scores.

    Equals P(score_pos > score_neg) with ties counted one half.  Counts are
    kept as integers (doubled) so the only rounding is the final division.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    # boundaries of runs of equal scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.size]
    twice = 0
    neg_below = 0
    for a, b in zip(starts.tolist(), ends.tolist()):
        pos = int(y[a:b].sum())
        neg = (b - a) - pos
        twice += 2 * pos * neg_below + pos * neg
        neg_below += neg
    return twice / (2 * n_pos * n_neg)


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) at each distinct score, highest threshold first."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / max(int(y.sum()), 1)]
    fpr = np.r_[0.0, fps / max(int(y.size - y.sum()), 1)]
    return fpr, tpr, np.r_[np.inf, s[last]]


def evaluate_predictions(scores, labels, threshold: float = 0.5) -> MetricReport:
    """Full report from class-1 probabilities; predicted label is score > threshold."""
    s = np.asarray(scores, dtype=np.float64)
    pred = (s > threshold).astype(np.int64)
    report = derive(confusion(pred, labels))
    try:
        report.auc = roc_auc(s, labels)
    except UndefinedMetricError:
        report.auc = 0.0
        report.degenerate = report.degenerate + ("auc",)
    return report


def aggregate_mean_std(reports: Sequence[MetricReport]) -> dict:
    """Per-metric (mean, population std) over runs."""
    if len(reports) < 2:
        raise ValueError(f"aggregation needs at least 2 reports, got {len(reports)}")
    out = {}
    for name in METRICS:
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            continue
        # exact-rational pstdev: identical runs give exactly 0
        out[name] = (statistics.fmean(vals), statistics.pstdev(map(float, vals)))
    return out


def format_pm(mean: float, std: float) -> str:
    """Percent, two decimals: (0.98, 0.0009) -> '98.00±0.09'."""
    return f"{mean * 100:.2f}±{std * 100:.2f}"


def format_cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, tuple):
        return format_pm(*value)
    return f"{value * 100:.2f}"


def render_table(rows: Sequence[tuple], first_column: str = "Run", title: Optional[str] = None) -> str:
    """Aligned plain-text table, one row per (label, {metric: value}).

    Values are either a (mean, std) pair or a single fraction.
    """
    header = [first_column, *COLUMN_TITLES]
    body = [[str(label), *(format_cell(cells.get(m)) for m in METRICS)] for label, cells in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def line(cols):
        return "  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()

    rule = "-" * len(line(header))
    out = []
    if title:
        out.append(title)
    out += [rule, line(header), rule, *(line(r) for r in body), rule]
    return "\n".join(out) + "\n"


def report_cells(report: MetricReport) -> dict:
    return {m: getattr(report, m) for m in METRICS}

