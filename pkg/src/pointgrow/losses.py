"""Weighted masked MSE loss: forward, analytic gradient, and class balancing.

The loss is the mean squared error between one-hot pseudo-labels and
predicted class probabilities, restricted to supervised pixels by a binary
mask and rebalanced per class by inverse frequency. Per sample, squared
errors are averaged over the supervised pixels (not all pixels) so the loss
magnitude is independent of image size and supervision coverage.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .validation import check_finite

DEFAULT_FREQ_EPS = 1e-6


@dataclass
class ClassWeights:
    """Per-class positive weights; ``eps`` is the frequency floor used."""

    weights: np.ndarray
    eps: float = DEFAULT_FREQ_EPS

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise DataError("class weights must be a 1-D vector")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise DataError("class weights must be finite and > 0")
        self.weights = w

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls(np.ones(num_classes))


@dataclass
class LossValue:
    total: float
    per_sample: np.ndarray

    def __post_init__(self):
        self.per_sample = np.asarray(self.per_sample, dtype=np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the class axis of an (N, C, H, W) field."""
    logits = np.asarray(logits, dtype=np.float64)
    check_finite(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def one_hot(masks: np.ndarray, num_classes: int) -> np.ndarray:
    """Indicator field (N, C, H, W) from integer class masks (N, H, W)."""
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise DataError(f"expected (N, H, W) masks, got shape {masks.shape}")
    if masks.size and (masks.min() < 0 or masks.max() >= num_classes):
        raise DataError(f"class ids must lie in [0, {num_classes})")
    n, h, w = masks.shape
    out = np.zeros((n, num_classes, h, w), dtype=np.float64)
    np.put_along_axis(out, masks[:, None, :, :], 1.0, axis=1)
    return out


def class_weights(pseudo_masks, num_classes: int, eps: float = DEFAULT_FREQ_EPS) -> ClassWeights:
    """Inverse supervised-pixel frequency per class, floored at eps.

    Computed once over a collection of pseudo-masks (a dataset statistic,
    not a per-batch one); classes absent from supervision get weight 1/eps.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for pm in pseudo_masks:
        labeled = pm.labels.classes[pm.supervised == 1]
        counts += np.bincount(labeled, minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise DataError("no supervised pixels; cannot compute class weights")
    freq = counts / total
    return ClassWeights(1.0 / np.maximum(freq, eps), eps)


def _check_loss_inputs(probs, targets, supervised, weights):
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    supervised = np.asarray(supervised, dtype=np.float64)
    if probs.ndim != 4:
        raise DataError(f"expected (N, C, H, W) predictions, got shape {probs.shape}")
    if targets.shape != probs.shape:
        raise DataError(f"prediction/label shape mismatch: {probs.shape} vs {targets.shape}")
    n, c, h, w = probs.shape
    if supervised.shape != (n, h, w):
        raise DataError(
            f"supervision mask must be (N, H, W) = {(n, h, w)}, got {supervised.shape}"
        )
    if not np.all(np.isfinite(probs)) or not np.all(np.isfinite(targets)):
        raise NumericError("loss inputs contain non-finite values")
    if len(weights.weights) != c:
        raise DataError(f"need {c} class weights, got {len(weights.weights)}")
    return probs, targets, supervised


def masked_loss_forward(
    probs: np.ndarray,
    targets: np.ndarray,
    supervised: np.ndarray,
    weights: ClassWeights,
) -> LossValue:
    """l_i = (1/C) sum_c w_c * sum_px m (wl - pl)^2 / max(sum_px m, 1)."""
    probs, targets, supervised = _check_loss_inputs(probs, targets, supervised, weights)
    n, c, _, _ = probs.shape
    diff = targets - probs
    masked_sq = diff * diff * supervised[:, None, :, :]
    per_sample_class = masked_sq.sum(axis=(2, 3))  # (N, C)
    denom = np.maximum(supervised.sum(axis=(1, 2)), 1.0)
    per_sample = per_sample_class @ weights.weights / (c * denom)
    return LossValue(float(per_sample.mean()), per_sample)


def masked_loss_backward(
    probs: np.ndarray,
    targets: np.ndarray,
    supervised: np.ndarray,
    weights: ClassWeights,
) -> np.ndarray:
    """Analytic dL/d(probs), shape (N, C, H, W)."""
    probs, targets, supervised = _check_loss_inputs(probs, targets, supervised, weights)
    n, c, _, _ = probs.shape
    denom = np.maximum(supervised.sum(axis=(1, 2)), 1.0)
    scale = supervised[:, None, :, :] * weights.weights[None, :, None, None]
    return -2.0 * scale * (targets - probs) / (n * c * denom[:, None, None, None])
