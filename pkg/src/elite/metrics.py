"""Confusion matrices, IoU and a wall-clock throughput probe."""
from __future__ import annotations

import time
from fractions import Fraction
from typing import Callable

import numpy as np

from .datasets import IGNORE
from .errors import ContractError, DimensionError


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, classes: int):
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def update(self, truth, pred) -> None:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise DimensionError("truth and prediction lengths differ")
        keep = truth != IGNORE
        t, p = truth[keep], pred[keep]
        if t.size and (t.max() >= self.classes or p.min() < 0 or p.max() >= self.classes or t.min() < 0):
            raise IndexError("class id out of range")
        self.counts += np.bincount(t * self.classes + p, minlength=self.classes**2).reshape(self.classes, self.classes)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou_per_class(self) -> list:
        if self.total == 0:
            raise ContractError("no scored samples")
        tp = np.diag(self.counts)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        return [float(tp[c] / union[c]) if union[c] > 0 else None for c in range(self.classes)]

    def miou(self) -> float:
        # exact rational mean of integer counts, rounded once
        if self.total == 0:
            raise ContractError("no scored samples")
        tp = np.diag(self.counts)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        ious = [Fraction(int(t), int(u)) for t, u in zip(tp, union) if u > 0]
        return float(sum(ious) / len(ious))

    def report(self) -> dict:
        return {
            "classes": self.classes,
            "iou": self.iou_per_class(),
            "miou": self.miou(),
            "samples": self.total,
            "support": self.counts.sum(axis=1).tolist(),
        }


def throughput(workload: Callable[[], object], warmup_iters: int = 1, timed_iters: int = 10) -> float:
    """Calls per second of ``workload`` after ``warmup_iters`` untimed calls.

    Each call must return only once its work is finished; nothing is
    overlapped between calls.
    """
    if timed_iters < 1:
        raise ContractError("timed_iters must be at least 1")
    for _ in range(warmup_iters):
        workload()
    start = time.perf_counter()
    for _ in range(timed_iters):
        workload()
    return timed_iters / (time.perf_counter() - start)
