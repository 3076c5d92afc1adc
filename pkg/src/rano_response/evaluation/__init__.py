from .metrics import (
    METRIC_NAMES,
    ConfusionMatrix,
    MetricsReport,
    balanced_accuracy,
    compute_metrics,
    confusion,
    recall_precision_f1,
)
from .stats import StatResult, dunn_posthoc, kruskal_wallis, mann_whitney_u

__all__ = [
    "METRIC_NAMES",
    "ConfusionMatrix",
    "MetricsReport",
    "StatResult",
    "balanced_accuracy",
    "compute_metrics",
    "confusion",
    "dunn_posthoc",
    "kruskal_wallis",
    "mann_whitney_u",
    "recall_precision_f1",
]
