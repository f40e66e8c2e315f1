"""Confusion matrices, Acc/Pre/Rec/F1 and report tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

METRIC_NAMES = ("acc", "pre", "rec", "f1")
TABLE_HEADER = ("Model", "Acc (%)", "Pre (%)", "Rec (%)", "F1 (%)")


def confusion_matrix(y_true, y_pred) -> np.ndarray:
    """Binary confusion matrix laid out ``[[TN, FP], [FN, TP]]``."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValidationError(f"label/prediction length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValidationError("cannot evaluate an empty set")
    if not (np.isin(y_true, (0, 1)).all() and np.isin(y_pred, (0, 1)).all()):
        raise ValidationError("labels and predictions must be 0 or 1")
    return np.bincount(2 * y_true + y_pred, minlength=4).reshape(2, 2)


def _ratio(num, den):
    return num / den if den else 0.0


def _hmean(a, b):
    return _ratio(2 * a * b, a + b)


def metrics_from_confusion(cm, averaging: str = "macro") -> dict:
    """Percent Acc/Pre/Rec/F1; F1 is the harmonic mean of the reported Pre and Rec.

    ``positive_class`` treats glaucoma (label 1) as positive; ``macro`` averages
    the per-class precision and recall over both classes. Empty denominators
    count as 0.
    """
    (tn, fp), (fn, tp) = np.asarray(cm, dtype=np.int64)
    n = tn + fp + fn + tp
    if n == 0:
        raise ValidationError("confusion matrix is empty")
    acc = (tp + tn) / n
    if averaging == "positive_class":
        pre, rec = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    elif averaging == "macro":
        pre = (_ratio(tp, tp + fp) + _ratio(tn, tn + fn)) / 2
        rec = (_ratio(tp, tp + fn) + _ratio(tn, tn + fp)) / 2
    else:
        raise ValidationError(f"unknown averaging {averaging!r}")
    return {"acc": 100 * acc, "pre": 100 * pre, "rec": 100 * rec, "f1": 100 * _hmean(pre, rec)}


@dataclass
class MetricsReport:
    confusion: np.ndarray
    acc: float
    pre: float
    rec: float
    f1: float
    averaging: str = "macro"

    @classmethod
    def from_confusion(cls, cm, averaging: str = "macro") -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        return cls(cm, averaging=averaging, **metrics_from_confusion(cm, averaging))

    @classmethod
    def from_predictions(cls, y_true, y_pred, averaging: str = "macro") -> "MetricsReport":
        return cls.from_confusion(confusion_matrix(y_true, y_pred), averaging)

    def values(self) -> tuple[float, float, float, float]:
        return (self.acc, self.pre, self.rec, self.f1)


@dataclass
class CrossValReport:
    """Per-fold reports plus the unweighted fold mean (its confusion is the fold sum)."""

    per_fold: list[MetricsReport]
    losses: list[list[float]] = field(default_factory=list)

    @property
    def aggregate(self) -> MetricsReport:
        means = {m: float(np.mean([getattr(r, m) for r in self.per_fold])) for m in METRIC_NAMES}
        total = sum(r.confusion for r in self.per_fold)
        return MetricsReport(total, averaging=self.per_fold[0].averaging, **means)

    @property
    def best_fold(self) -> int:
        """Highest accuracy, ties broken by F1, then by lowest index."""
        return max(range(len(self.per_fold)), key=lambda i: (self.per_fold[i].acc, self.per_fold[i].f1, -i))


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def fold_csv(report: CrossValReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", *METRIC_NAMES])
    for i, r in enumerate(report.per_fold):
        w.writerow([i, *map(_fmt, r.values())])
    w.writerow(["mean", *map(_fmt, report.aggregate.values())])
    return buf.getvalue()


def rows_csv(rows: list[tuple[str, MetricsReport]], key: str = "model") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, *METRIC_NAMES])
    for name, r in rows:
        w.writerow([name, *map(_fmt, r.values())])
    return buf.getvalue()


def render_table(rows: list[tuple[str, MetricsReport]], title: str | None = None) -> str:
    """Plain-text table with columns Model / Acc / Pre / Rec / F1 (two decimals)."""
    body = [TABLE_HEADER] + [(name, *(f"{v:.2f}" for v in r.values())) for name, r in rows]
    widths = [max(len(row[i]) for row in body) for i in range(len(TABLE_HEADER))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))

    def line(row):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))

    out = [title] if title else []
    out += [rule, line(body[0]), rule, *(line(r) for r in body[1:]), rule]
    return "\n".join(out) + "\n"
