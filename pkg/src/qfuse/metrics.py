"""Accuracy and macro-averaged precision / recall / F1 from a confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray
    per_class_precision: np.ndarray = field(repr=False, default=None)
    per_class_recall: np.ndarray = field(repr=False, default=None)
    per_class_f1: np.ndarray = field(repr=False, default=None)
    undefined_precision: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
            "undefined_precision_classes": np.flatnonzero(self.undefined_precision).tolist(),
        }


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    """Macro scores over classes with nonzero support.

    A class never predicted has precision 0 (and is flagged in
    ``undefined_precision``); F1 is 0 when precision + recall is 0.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ContractError("cannot score an empty evaluation set")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    undefined = predicted == 0
    precision = np.where(undefined, 0.0, tp / np.maximum(predicted, 1))
    recall = np.where(support == 0, 0.0, tp / np.maximum(support, 1))
    denom = precision + recall
    f1 = np.where(denom == 0, 0.0, 2 * precision * recall / np.where(denom == 0, 1.0, denom))
    present = support > 0
    return Metrics(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        confusion=cm,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        undefined_precision=undefined & present,
    )


def compute_metrics(y_true, y_pred, num_classes: int) -> Metrics:
    if len(y_true) == 0:
        raise ContractError("cannot score an empty evaluation set")
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))
