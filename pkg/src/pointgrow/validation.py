"""Input validation helpers, in the spirit of sklearn's check_array."""

import numpy as np

from .errors import DataError, InvalidClassError, NumericError, ShapeMismatchError


def check_image_array(pixels) -> np.ndarray:
    """Validate an (H, W, 3) uint8 RGB pixel array."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) RGB array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError("image must be at least 1x1")
    if arr.dtype != np.uint8:
        raise DataError(f"expected uint8 pixels, got {arr.dtype}")
    return arr


def check_mask_array(classes, num_classes: int) -> np.ndarray:
    """Validate an (H, W) integer class-index array against num_classes."""
    arr = np.asarray(classes)
    if arr.ndim != 2:
        raise DataError(f"expected (H, W) mask array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"expected integer mask, got {arr.dtype}")
    if num_classes < 1:
        raise DataError("num_classes must be >= 1")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise InvalidClassError(
            f"mask values must lie in [0, {num_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr


def check_same_shape(a, b, what: str = "arrays") -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"{what} must share a shape: {np.shape(a)} vs {np.shape(b)}")


def check_finite(arr, what: str = "input") -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


def check_in_bounds(x: int, y: int, width: int, height: int) -> None:
    if not (0 <= x < width and 0 <= y < height):
        raise DataError(f"point ({x}, {y}) outside {width}x{height} image")
