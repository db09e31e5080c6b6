"""Segmentation evaluation: pooled confusion matrix, per-class IoU, meanIoU."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    """C x C int64 counts, rows = ground truth, cols = prediction.

    Pixels whose ground-truth class equals ignore_label are skipped.
    64-bit counts: full-scale datasets overflow 32-bit pixel totals.
    """

    num_classes: int
    ignore_label: int | None = None
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValueError(f"counts must be CxC, got {self.counts.shape}")
            if (self.counts < 0).any():
                raise ValueError("counts must be non-negative")

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, gt_map, pred_map) -> ConfusionMatrix:
    """Add one image's pixels to the matrix; associative across images."""
    gt = np.asarray(gt_map)
    pred = np.asarray(pred_map)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    gt = gt.reshape(-1).astype(np.int64)
    pred = pred.reshape(-1).astype(np.int64)
    if cm.ignore_label is not None:
        keep = gt != cm.ignore_label
        gt, pred = gt[keep], pred[keep]
    c = cm.num_classes
    if gt.size:
        if gt.min() < 0 or gt.max() >= c:
            raise ValueError(f"ground-truth class id outside [0, {c})")
        if pred.min() < 0 or pred.max() >= c:
            raise ValueError(f"predicted class id outside [0, {c})")
        cm.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
    return cm


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    """Entrywise sum; equals accumulating the union of the two image sets."""
    if a.num_classes != b.num_classes or a.ignore_label != b.ignore_label:
        raise ValueError("cannot merge matrices with different class setups")
    return ConfusionMatrix(a.num_classes, a.ignore_label, a.counts + b.counts)


@dataclass
class SegEvalReport:
    per_class_iou: list[float | None]  # None marks classes absent from gt and pred
    mean_iou: float
    gt_pixels_per_class: list[int]


def iou_report(cm: ConfusionMatrix) -> SegEvalReport:
    """Per-class IoU = TP / (TP + FP + FN); absent classes are excluded from the mean."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class: list[float | None] = []
    defined = []
    for c in range(cm.num_classes):
        if denom[c] == 0:
            per_class.append(None)
        else:
            iou = float(tp[c] / denom[c])
            per_class.append(iou)
            defined.append(iou)
    mean = float(np.mean(defined)) if defined else float("nan")
    return SegEvalReport(
        per_class_iou=per_class,
        mean_iou=mean,
        gt_pixels_per_class=[int(v) for v in cm.counts.sum(axis=1)],
    )
