"""Confusion matrices and the four reported classification metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..cohort import N_CLASSES

logger = logging.getLogger(__name__)

METRIC_NAMES = ("balanced_accuracy", "f1", "precision", "recall")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth (PD, SD, PR, CR), columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds: Sequence[int], truths: Sequence[int], n_classes: int = N_CLASSES) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {truths.size} labels")
    if preds.size and (preds.min() < 0 or preds.max() >= n_classes or truths.min() < 0 or truths.max() >= n_classes):
        raise ValueError(f"class indices must lie in 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts)


def _per_class(cm: ConfusionMatrix):
    c = cm.counts.astype(float)
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    present = support > 0
    if not present.any():
        raise ValueError("confusion matrix has no samples")
    if not present.all():
        logger.info("classes %s have no samples and are excluded", np.flatnonzero(~present).tolist())
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    unpredicted = present & (predicted == 0)
    if unpredicted.any():
        logger.info("classes %s were never predicted; their precision counts as 0", np.flatnonzero(unpredicted).tolist())
    return recall, precision, support, present


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over classes that have at least one sample."""
    recall, _, _, present = _per_class(cm)
    return float(recall[present].mean())


def f1_from(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        warnings.warn("precision + recall = 0; F1 set to 0")
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def recall_precision_f1(cm: ConfusionMatrix, literal: bool = False) -> tuple[float, float, float]:
    """Support-weighted recall and precision, and their harmonic mean.

    With ``literal=True`` the per-class terms are weighted by ``1/n_i`` instead
    of ``n_i/n``; that variant is not bounded by 1 and exists only for audit.
    """
    recall_i, precision_i, support, present = _per_class(cm)
    if literal:
        w = np.divide(1.0, support, out=np.zeros_like(support), where=support > 0)
        recall = float((recall_i * w)[present].sum())
        precision = float((precision_i * w)[present].sum())
    else:
        # sum(x_i n_i) / n rather than sum(x_i n_i / n): exact when every x_i is 1
        n = support.sum()
        recall = float((recall_i * support)[present].sum() / n)
        precision = float((precision_i * support)[present].sum() / n)
    return recall, precision, f1_from(precision, recall)


@dataclass
class MetricsReport:
    balanced_accuracy: float
    recall: float
    precision: float
    f1: float
    per_fold: list["MetricsReport"] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_fold"] = [f.to_dict() for f in self.per_fold]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            balanced_accuracy=d["balanced_accuracy"],
            recall=d["recall"],
            precision=d["precision"],
            f1=d["f1"],
            per_fold=[cls.from_dict(f) for f in d.get("per_fold", [])],
        )

    @classmethod
    def aggregate(cls, folds: Sequence["MetricsReport"]) -> "MetricsReport":
        """Median over folds, keeping the folds themselves."""
        med = {k: float(np.median([getattr(f, k) for f in folds])) for k in METRIC_NAMES}
        return cls(**med, per_fold=list(folds))


def compute_metrics(preds: Sequence[int], truths: Sequence[int], literal: bool = False) -> MetricsReport:
    cm = confusion(preds, truths)
    recall, precision, f1 = recall_precision_f1(cm, literal=literal)
    return MetricsReport(balanced_accuracy(cm), recall, precision, f1)
