"""UF1 / UAR from a pooled confusion matrix.

Rows of the confusion matrix are true classes, columns are predictions. A
class with no true samples gets recall 0 and F1 0, and still counts in the
unweighted means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from ..core import UsageError


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise UsageError(f"{len(preds)} predictions for {len(labels)} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise UsageError(f"{name} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class MetricsReport:
    uf1: float
    uar: float
    accuracy: float
    confusion: np.ndarray
    f1: List[float] = field(default_factory=list)
    recall: List[float] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        tp = np.diag(cm).astype(np.float64)
        support = cm.sum(axis=1)
        predicted = cm.sum(axis=0)
        recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
        denom = support + predicted
        f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
        total = cm.sum()
        return cls(
            uf1=float(f1.mean()),
            uar=float(recall.mean()),
            accuracy=float(tp.sum() / total) if total else 0.0,
            confusion=cm,
            f1=f1.tolist(),
            recall=recall.tolist(),
        )

    def to_dict(self) -> Dict:
        return {
            "uf1": round(self.uf1, 6),
            "uar": round(self.uar, 6),
            "accuracy": round(self.accuracy, 6),
            "f1": [round(v, 6) for v in self.f1],
            "recall": [round(v, 6) for v in self.recall],
            "confusion": self.confusion.tolist(),
        }


def compute_metrics(preds, labels, num_classes: int = 3) -> MetricsReport:
    return MetricsReport.from_confusion(confusion_matrix(preds, labels, num_classes))
