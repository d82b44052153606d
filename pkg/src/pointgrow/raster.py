"""Image and class-mask containers plus PNG persistence.

Images are 8-bit RGB; class masks are stored as 8-bit grayscale PNGs whose
pixel value is the raw class index (lossless and trivially diffable).
Superpixel id maps use 16-bit grayscale, see :mod:`pointgrow.superpixels`.
"""

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    InvalidClassError,
    MalformedPNGError,
    MissingFileError,
    UnsupportedFormatError,
)
from .validation import check_image_array, check_mask_array

# Rec. 601 luma coefficients, used for all gradient computations.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class RasterImage:
    """An RGB image; ``pixels`` is (H, W, 3) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = check_image_array(self.pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class ClassMask:
    """Per-pixel class indices; ``classes`` is (H, W) uint8, values < num_classes."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.classes = check_mask_array(self.classes, self.num_classes)

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def height(self) -> int:
        return self.classes.shape[0]


@dataclass
class EdgeMap:
    """Per-pixel gradient strength, normalized to [0, 1]."""

    magnitude: np.ndarray

    def __post_init__(self):
        mag = np.asarray(self.magnitude, dtype=np.float64)
        if mag.ndim != 2:
            raise ValueError(f"edge map must be 2-D, got shape {mag.shape}")
        if mag.size and (mag.min() < 0.0 or mag.max() > 1.0):
            raise ValueError("edge magnitudes must lie in [0, 1]")
        self.magnitude = mag

    @property
    def width(self) -> int:
        return self.magnitude.shape[1]

    @property
    def height(self) -> int:
        return self.magnitude.shape[0]


def _open_png(path):
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MalformedPNGError(f"cannot decode PNG {path}: {exc}") from exc
    return img


def read_image(path) -> RasterImage:
    """Read an 8-bit RGB or grayscale PNG; grayscale is expanded to RGB."""
    img = _open_png(path)
    if img.mode == "L":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise UnsupportedFormatError(
            f"{path}: unsupported image mode {img.mode!r} (want 8-bit RGB or grayscale)"
        )
    return RasterImage(np.asarray(img, dtype=np.uint8))


def write_image(image: RasterImage, path) -> None:
    Image.fromarray(image.pixels).save(path, format="PNG")


def encode_image_png(image: RasterImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.pixels).save(buf, format="PNG")
    return buf.getvalue()


def read_mask(path, num_classes: int) -> ClassMask:
    """Read an 8-bit grayscale class mask; values must be < num_classes."""
    img = _open_png(path)
    if img.mode != "L":
        raise UnsupportedFormatError(
            f"{path}: unsupported mask mode {img.mode!r} (want 8-bit grayscale)"
        )
    arr = np.asarray(img, dtype=np.uint8)
    if arr.size and arr.max() >= num_classes:
        raise InvalidClassError(
            f"{path}: mask value {arr.max()} >= num_classes {num_classes}"
        )
    return ClassMask(arr, num_classes)


def write_mask(mask: ClassMask, path) -> None:
    if mask.num_classes > 256:
        raise InvalidClassError("8-bit mask PNG supports at most 256 classes")
    Image.fromarray(mask.classes.astype(np.uint8)).save(path, format="PNG")


def encode_mask_png(mask: ClassMask) -> bytes:
    if mask.num_classes > 256:
        raise InvalidClassError("8-bit mask PNG supports at most 256 classes")
    buf = io.BytesIO()
    Image.fromarray(mask.classes.astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def luminance(image: RasterImage) -> np.ndarray:
    """Rec. 601 luminance as float64, shape (H, W)."""
    r, g, b = LUMA_WEIGHTS
    px = image.pixels.astype(np.float64)
    return r * px[:, :, 0] + g * px[:, :, 1] + b * px[:, :, 2]


def sobel_edges(image: RasterImage) -> EdgeMap:
    """3x3 Sobel gradient magnitude on luminance.

    Borders are handled by replicating edge pixels; the result is linearly
    scaled so the per-image maximum maps to 1 (all zeros when the gradient
    vanishes everywhere, e.g. constant images).
    """
    lum = luminance(image)
    padded = np.pad(lum, 1, mode="edge")
    # 3x3 Sobel as separable sums over the padded array.
    left = padded[:, :-2]
    right = padded[:, 2:]
    gx_rows = right - left  # (H+2, W)
    gx = gx_rows[:-2, :] + 2.0 * gx_rows[1:-1, :] + gx_rows[2:, :]
    top = padded[:-2, :]
    bottom = padded[2:, :]
    gy_cols = bottom - top  # (H, W+2)
    gy = gy_cols[:, :-2] + 2.0 * gy_cols[:, 1:-1] + gy_cols[:, 2:]
    mag = np.hypot(gx, gy)
    peak = mag.max() if mag.size else 0.0
    if peak > 0:
        mag /= peak
    return EdgeMap(mag)
