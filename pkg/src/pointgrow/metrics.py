"""Segmentation metrics: confusion matrix and micro-averaged Jaccard.

The headline metric pools intersection/union counts over all classes except
the ignored one (background by convention) before dividing, i.e. "micro"
statistics rather than a per-class average.
"""

import numpy as np

from .validation import check_same_shape


def _as_classes(mask) -> np.ndarray:
    arr = getattr(mask, "classes", mask)
    return np.asarray(arr)


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Counts table: entry (g, p) is the number of pixels with gt=g, pred=p."""
    pred = _as_classes(pred)
    gt = _as_classes(gt)
    check_same_shape(pred, gt, "prediction and ground truth")
    joint = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    counts = np.bincount(joint, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou_micro(pred, gt, num_classes: int, ignore_index: int = 0) -> float:
    """Pooled Jaccard over all classes except ignore_index.

    Returns 1.0 when neither side contains any non-ignored class (empty
    union convention).
    """
    pred = _as_classes(pred)
    gt = _as_classes(gt)
    check_same_shape(pred, gt, "prediction and ground truth")
    intersection = 0
    union = 0
    for c in range(num_classes):
        if c == ignore_index:
            continue
        p = pred == c
        g = gt == c
        intersection += int(np.count_nonzero(p & g))
        union += int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return intersection / union


def miou_from_confusion(confusion: np.ndarray, ignore_index: int = 0) -> float:
    """Same metric recomputed from a (pooled) confusion matrix, exactly."""
    confusion = np.asarray(confusion, dtype=np.int64)
    diag = np.diag(confusion)
    gt_counts = confusion.sum(axis=1)
    pred_counts = confusion.sum(axis=0)
    keep = np.ones(len(confusion), dtype=bool)
    keep[ignore_index] = False
    intersection = int(diag[keep].sum())
    union = int((gt_counts[keep] + pred_counts[keep] - diag[keep]).sum())
    if union == 0:
        return 1.0
    return intersection / union


def per_class_iou(confusion: np.ndarray) -> list:
    """Per-class Jaccard from a confusion matrix (1.0 for absent classes)."""
    confusion = np.asarray(confusion, dtype=np.int64)
    diag = np.diag(confusion)
    union = confusion.sum(axis=1) + confusion.sum(axis=0) - diag
    return [float(d / u) if u else 1.0 for d, u in zip(diag, union)]


def metrics_report(confusion: np.ndarray, ignore_index: int = 0) -> dict:
    """JSON-ready report: micro mIoU, per-class IoU, raw confusion counts."""
    return {
        "miou": miou_from_confusion(confusion, ignore_index),
        "per_class_iou": per_class_iou(confusion),
        "confusion": np.asarray(confusion, dtype=np.int64).tolist(),
    }
