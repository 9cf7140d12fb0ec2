"""Segmentation evaluation: per-class IoU and its mean.

Ignore-index pixels are excluded from both intersections and unions;
classes absent from prediction and ground truth alike are excluded from
the mean. Counts accumulate across samples so dataset-level reports use
aggregate pixel sets, not a mean of per-image scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE_INDEX = 255


@dataclass
class EvalReport:
    class_ids: list
    per_class_iou: list          # float, or None where IoU is undefined
    miou: float
    intersections: np.ndarray    # int64 per class
    unions: np.ndarray           # int64 per class


class MiouAccumulator:
    def __init__(self, class_ids):
        self.class_ids = [int(c) for c in class_ids]
        self.inter = np.zeros(len(self.class_ids), dtype=np.int64)
        self.union = np.zeros(len(self.class_ids), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(
                f"prediction shape {pred.shape} != ground truth shape {gt.shape}"
            )
        valid = gt != IGNORE_INDEX
        for i, c in enumerate(self.class_ids):
            p = (pred == c) & valid
            g = gt == c
            self.inter[i] += int(np.count_nonzero(p & g))
            self.union[i] += int(np.count_nonzero(p | g))

    def report(self) -> EvalReport:
        per_class = [
            float(i) / float(u) if u > 0 else None
            for i, u in zip(self.inter, self.union)
        ]
        defined = [v for v in per_class if v is not None]
        miou_val = float(np.mean(defined)) if defined else 0.0
        return EvalReport(
            class_ids=list(self.class_ids),
            per_class_iou=per_class,
            miou=miou_val,
            intersections=self.inter.copy(),
            unions=self.union.copy(),
        )


def miou(pred: np.ndarray, gt: np.ndarray, class_ids) -> EvalReport:
    acc = MiouAccumulator(class_ids)
    acc.add(pred, gt)
    return acc.report()
