"""Segmentation metrics from a pixel confusion matrix, and class weighting.

``mIoU`` is the mean over classes of TP/(TP+FP+FN); ``mAcc`` the mean
per-class recall TP/(TP+FN). Classes absent from both prediction and ground
truth have an undefined score and are excluded from the means (reported as
NaN per class) rather than counted as 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UndefinedMetricsError


class ConfusionMatrix:
    """C x C pixel counts; entry (i, j) = pixels of truth i predicted j."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ShapeError(f"need at least one class, got {num_classes}")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def update(self, predicted: np.ndarray, truth: np.ndarray, ignore_class: int | None = None):
        if predicted.shape != truth.shape:
            raise ShapeError(
                f"prediction {predicted.shape} and truth {truth.shape} dims differ")
        p = predicted.reshape(-1).astype(np.int64)
        t = truth.reshape(-1).astype(np.int64)
        if ignore_class is not None:
            keep = t != ignore_class
            p, t = p[keep], t[keep]
        c = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= c or t.min() < 0 or t.max() >= c):
            raise ShapeError(f"label outside [0, {c})")
        flat = np.bincount(t * c + p, minlength=c * c)
        self.counts += flat.reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Metrics:
    miou: float
    macc: float
    per_class_iou: tuple[float, ...]  # NaN marks undefined classes


def metrics(cm: ConfusionMatrix) -> Metrics:
    counts = cm.counts
    if counts.sum() == 0:
        raise UndefinedMetricsError("confusion matrix holds no pixels")
    tp = np.diag(counts).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)  # TP + FN per class
    col = counts.sum(axis=0).astype(np.float64)  # TP + FP per class
    iou_den = row + col - tp
    per_iou = np.where(iou_den > 0, tp / np.maximum(iou_den, 1), np.nan)
    valid_iou = ~np.isnan(per_iou)
    if not valid_iou.any():
        raise UndefinedMetricsError("every class is undefined")
    miou = float(per_iou[valid_iou].mean())
    recall = np.where(row > 0, tp / np.maximum(row, 1), np.nan)
    valid_acc = ~np.isnan(recall)
    macc = float(recall[valid_acc].mean()) if valid_acc.any() else float("nan")
    return Metrics(miou, macc, tuple(float(v) for v in per_iou))


def class_weights(frequencies, policy: str) -> np.ndarray:
    """Per-class loss multipliers from train-split pixel frequencies."""
    f = np.asarray(frequencies, dtype=np.float64)
    if (f < 0).any():
        raise ValueError(f"negative class frequency: {f}")
    if policy == "none":
        return np.ones_like(f)
    if policy == "inverse_frequency":
        w = 1.0 / np.maximum(f, 1e-6)
        return w / w.mean()
    if policy == "log_inverse":
        return 1.0 / np.log(1.02 + f)
    raise ValueError(f"unknown weighting policy {policy!r}")
