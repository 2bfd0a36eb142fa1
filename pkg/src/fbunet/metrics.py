"""Confusion-matrix IoU over a whole split."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import ShapeError


class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth ``g`` predicted as ``p``."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, predicted, labels):
        predicted = np.asarray(predicted).ravel()
        labels = np.asarray(labels).ravel()
        if predicted.shape != labels.shape:
            raise ShapeError("prediction and label sizes differ")
        C = self.num_classes
        self.counts += np.bincount(labels * C + predicted, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def predict_labels(probs) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1)


def accumulate_confusion(cm: ConfusionMatrix, probs, labels) -> ConfusionMatrix:
    pred = predict_labels(probs)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {labels.shape}")
    return cm.update(pred, labels)


def iou(cm: ConfusionMatrix):
    """Per-class IoU (NaN where undefined) and the mean over defined classes."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    per_class = np.full(cm.num_classes, np.nan)
    ok = denom > 0
    per_class[ok] = tp[ok] / denom[ok]
    mean = float(per_class[ok].mean()) if ok.any() else float("nan")
    return per_class, mean
