"""Pixel confusion counting and the five change-class metrics.

Counts are plain integers and add across disjoint pixel sets, so sharded
evaluation followed by summation is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError, ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
            "oa": self.oa,
            "tp": self.counts.tp,
            "tn": self.counts.tn,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
        }

    def format(self) -> str:
        c = self.counts
        return (
            f"precision {self.precision:.4f}  recall {self.recall:.4f}  f1 {self.f1:.4f}  "
            f"iou {self.iou:.4f}  oa {self.oa:.4f}  (tp {c.tp} tn {c.tn} fp {c.fp} fn {c.fn})"
        )


def threshold(probabilities: np.ndarray, t: float = 0.5) -> np.ndarray:
    """Binarize change probabilities; p == t counts as change."""
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"threshold must lie in [0, 1], got {t}")
    return (np.asarray(probabilities) >= t).astype(np.uint8)


def _check_binary(arr: np.ndarray, role: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError(f"{role} must be binary (0/1)")
    return arr


def confusion(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    """Per-pixel tally against the change class (value 1)."""
    pred = _check_binary(pred, "prediction")
    target = _check_binary(target, "ground truth")
    if pred.shape != target.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth shape {target.shape}")
    p = pred.astype(bool)
    t = target.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def derive_metrics(c: ConfusionCounts) -> MetricsReport:
    """Precision, recall, F1 (harmonic mean), IoU, and overall accuracy.

    Zero-denominator convention: a metric is 0 when its denominator is 0,
    except the ideal empty-vs-empty case tp=fp=fn=0 where Pr=Rc=F1=IoU=1.
    """
    if c.total == 0:
        raise UsageError("cannot derive metrics from zero evaluated pixels")
    if c.tp == 0 and c.fp == 0 and c.fn == 0:
        pr = rc = f1 = iou = 1.0
    else:
        pr = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
        rc = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
        f1 = 2.0 * pr * rc / (pr + rc) if pr + rc else 0.0
        iou = c.tp / (c.tp + c.fp + c.fn)
    oa = (c.tp + c.tn) / c.total
    return MetricsReport(precision=pr, recall=rc, f1=f1, iou=iou, oa=oa, counts=c)


def f1_iou_from_precision_recall(pr: float, rc: float) -> tuple[float, float]:
    """F1 and IoU implied by a precision/recall pair, all as fractions in [0, 1]."""
    if not (0.0 <= pr <= 1.0 and 0.0 <= rc <= 1.0):
        raise UsageError(f"precision/recall must be fractions in [0, 1], got {pr} / {rc}")
    f1 = 2.0 * pr * rc / (pr + rc) if pr + rc else 0.0
    iou = f1 / (2.0 - f1) if f1 else 0.0
    return f1, iou
