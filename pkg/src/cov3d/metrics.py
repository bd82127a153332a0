"""Confusion-matrix metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray  # rows = true class, cols = predicted class
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro_f1": self.macro_f1,
        }

    def format(self, class_names=None) -> str:
        c = self.confusion.shape[0]
        names = list(class_names) if class_names is not None else [str(i) for i in range(c)]
        width = max(8, *(len(n) for n in names))
        lines = ["confusion (rows true, cols predicted):",
                 " " * (width + 2) + "".join(f"{n:>{width}}" for n in names)]
        for i, n in enumerate(names):
            lines.append(f"  {n:<{width}}" + "".join(f"{v:>{width}d}" for v in self.confusion[i]))
        lines.append(f"  {'class':<{width}}{'precision':>10}{'recall':>10}{'f1':>10}")
        for i, n in enumerate(names):
            lines.append(f"  {n:<{width}}{self.precision[i]:>10.4f}{self.recall[i]:>10.4f}{self.f1[i]:>10.4f}")
        lines.append(f"macro F1: {self.macro_f1:.4f}")
        return "\n".join(lines)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def confusion_matrix(preds, labels, num_classes: int = 2) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.size == 0:
        raise ValueError("cannot compute metrics on an empty prediction set")
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions but {labels.size} labels")
    for what, arr in (("prediction", preds), ("label", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{what} values must lie in [0, {num_classes}), got range [{arr.min()}, {arr.max()}]")
    return np.bincount(labels * num_classes + preds, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


def macro_f1(preds, labels, num_classes: int = 2) -> MetricsReport:
    """Per-class precision/recall/F1 and their unweighted mean; any 0/0 counts as 0."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, actual)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return MetricsReport(cm, precision, recall, f1, float(f1.mean()))
