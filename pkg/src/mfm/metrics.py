"""Confusion matrix and IoU."""
from __future__ import annotations

import numpy as np

IGNORE_INDEX = 255


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, truth):
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
        if (pred == IGNORE_INDEX).any():
            raise ValueError("predictions must assign a class to every pixel (found 255)")
        keep = truth != IGNORE_INDEX
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if t.size and (t.max() >= k or p.max() >= k or t.min() < 0 or p.min() < 0):
            raise ValueError(f"class index outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def miou(self):
        return miou(self.counts)

    def report(self, class_names=None):
        ious, mean = self.miou()
        names = class_names or [str(i) for i in range(self.num_classes)]
        return {
            "miou": mean,
            "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, ious)},
            "pixel_counts": {n: int(c) for n, c in zip(names, self.counts.sum(axis=1))},
            "scored_pixels": self.total,
        }


def accumulate(conf: ConfusionMatrix, pred, truth):
    return conf.accumulate(pred, truth)


def miou(conf):
    """Per-class IoU (NaN where undefined) and the mean over defined classes."""
    conf = np.asarray(conf, dtype=np.float64)
    diag = np.diag(conf)
    denom = conf.sum(axis=1) + conf.sum(axis=0) - diag
    ious = np.full(len(diag), np.nan)
    ok = denom > 0
    ious[ok] = diag[ok] / denom[ok]
    mean = float(ious[ok].mean()) if ok.any() else float("nan")
    return ious, mean
