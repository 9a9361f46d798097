"""Confusion-matrix bookkeeping and intersection-over-union summaries."""

from __future__ import annotations

import numpy as np

from .errors import MetricError


class ConfusionMatrix:
    """Accumulates (ground truth, prediction) counts; rows index ground truth.

    Classes whose union (TP + FP + FN) is zero never appeared and are left
    out of the mean rather than counted as zero.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise MetricError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt, pred, ignore=()):
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise MetricError(f"shape mismatch: {gt.shape} vs {pred.shape}")
        keep = np.ones(gt.shape, dtype=bool)
        for label in ignore:
            keep &= gt != label
        gt = gt[keep]
        pred = pred[keep]
        if gt.size == 0:
            return self
        c = self.num_classes
        if gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c:
            raise MetricError("class index outside [0, num_classes)")
        flat = gt.astype(np.int64) * c + pred.astype(np.int64)
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricError("cannot merge matrices of different sizes")
        self.counts += other.counts
        return self

    def iou(self):
        """Per-class IoU; NaN marks classes absent from both gt and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        out = np.full(self.num_classes, np.nan)
        seen = union > 0
        out[seen] = tp[seen] / union[seen]
        return out

    def miou(self) -> float:
        per_class = self.iou()
        seen = ~np.isnan(per_class)
        if not seen.any():
            raise MetricError("no class was ever observed")
        return float(per_class[seen].mean())

    def accuracy(self) -> float:
        total = self.counts.sum()
        if total == 0:
            raise MetricError("no samples accumulated")
        return float(np.trace(self.counts) / total)
