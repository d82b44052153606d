"""Synthetic aerial-style scenes with exact ground truth.

Scenes are a flat background with randomly placed rectangles (buildings),
discs (woodland/water blobs) and strips (roads) painted on top; later shapes
occlude earlier ones and the mask records the exact class of the topmost
shape at every pixel.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .raster import ClassMask, RasterImage

NUM_CLASSES = 5

# Class palette: background dark gray, buildings red, woodland green,
# water blue, road yellow. Also served to the UI for overlays.
PALETTE = (
    (61, 61, 61),
    (219, 61, 52),
    (58, 166, 74),
    (51, 102, 221),
    (228, 211, 72),
)

CLASS_NAMES = ("background", "buildings", "woodland", "water", "road")

SHAPE_KINDS = ("rectangle", "disc", "strip")


@dataclass
class SyntheticSceneSpec:
    width: int = 64
    height: int = 64
    min_shapes: int = 3
    max_shapes: int = 7
    base_colors: tuple = PALETTE
    noise_sigma: float = 8.0
    shape_kinds: tuple = SHAPE_KINDS
    # per-shape uniform color offset (channel units); breaks the one-color-
    # per-class shortcut so dense supervision genuinely beats sparse points
    shape_color_jitter: float = 0.0
    # max per-channel drift across a region (linear shading); systematic
    # within-region variation makes superpixels straddle real boundaries
    shape_shading: float = 0.0
    # some shapes are labeled to their true extent but only painted on a
    # shrunken core (occluded rims, like roads under tree cover): ground
    # truth then genuinely exceeds what color-following superpixels can see
    occlusion_prob: float = 0.0
    occlusion_depth: float = 0.3

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataError("scene dimensions must be >= 1")
        if not (0 <= self.min_shapes <= self.max_shapes):
            raise DataError("shape count range must satisfy 0 <= min <= max")
        if len(self.base_colors) != NUM_CLASSES:
            raise DataError(f"need exactly {NUM_CLASSES} base colors")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be >= 0")
        if self.shape_color_jitter < 0:
            raise DataError("shape color jitter must be >= 0")
        if self.shape_shading < 0:
            raise DataError("shape shading must be >= 0")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise DataError("occlusion probability must lie in [0, 1]")
        if not 0.0 <= self.occlusion_depth < 1.0:
            raise DataError("occlusion depth must lie in [0, 1)")
        if not self.shape_kinds or any(k not in SHAPE_KINDS for k in self.shape_kinds):
            raise DataError(f"shape kinds must be among {SHAPE_KINDS}")


@dataclass
class Shape:
    """One painted primitive; ``params`` depends on ``kind``.

    rectangle: (x0, y0, x1, y1) half-open pixel bounds
    disc:      (cx, cy, radius)
    strip:     (px, py, nx, ny, half_width) - band around the line through
               (px, py) with unit normal (nx, ny)
    """

    kind: str
    class_id: int
    params: tuple = field(default_factory=tuple)
    color: tuple | None = None  # None paints the class base color
    shading: tuple | None = None  # (nx, ny, (ar, ag, ab)) linear drift
    visible_params: tuple | None = None  # shrunken paint extent; None = params

    def contains(self, x: float, y: float) -> bool:
        if self.kind == "rectangle":
            x0, y0, x1, y1 = self.params
            return x0 <= x < x1 and y0 <= y < y1
        if self.kind == "disc":
            cx, cy, r = self.params
            return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
        px, py, nx, ny, hw = self.params
        return abs((x - px) * nx + (y - py) * ny) <= hw


def sample_shapes(spec: SyntheticSceneSpec, seed: int) -> list[Shape]:
    """Draw the scene's shape list; painting order is list order."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    side = min(spec.width, spec.height)
    shapes = []
    for _ in range(count):
        class_id = int(rng.integers(1, NUM_CLASSES))
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        if kind == "rectangle":
            w = max(2, int(rng.integers(side // 6, side // 2 + 1)))
            h = max(2, int(rng.integers(side // 6, side // 2 + 1)))
            x0 = int(rng.integers(0, max(1, spec.width - w + 1)))
            y0 = int(rng.integers(0, max(1, spec.height - h + 1)))
            params = (x0, y0, min(x0 + w, spec.width), min(y0 + h, spec.height))
        elif kind == "disc":
            r = max(2.0, float(rng.uniform(side / 10, side / 4)))
            cx = float(rng.uniform(0, spec.width))
            cy = float(rng.uniform(0, spec.height))
            params = (cx, cy, r)
        else:
            theta = float(rng.uniform(0, math.pi))
            nx, ny = math.cos(theta), math.sin(theta)
            px = float(rng.uniform(0, spec.width))
            py = float(rng.uniform(0, spec.height))
            hw = max(1.0, float(rng.uniform(side / 32, side / 12)))
            params = (px, py, nx, ny, hw)
        color = None
        if spec.shape_color_jitter > 0:
            offset = rng.uniform(-spec.shape_color_jitter, spec.shape_color_jitter, 3)
            color = tuple(
                float(np.clip(c + o, 0, 255))
                for c, o in zip(spec.base_colors[class_id], offset)
            )
        shading = _draw_shading(rng, spec.shape_shading)
        visible = None
        if spec.occlusion_prob > 0 and rng.random() < spec.occlusion_prob:
            visible = _shrink(kind, params, spec.occlusion_depth)
        shapes.append(Shape(kind, class_id, params, color, shading, visible))
    return shapes


def _shrink(kind: str, params: tuple, depth: float) -> tuple:
    keep = 1.0 - depth
    if kind == "rectangle":
        x0, y0, x1, y1 = params
        dx = (x1 - x0) * depth / 2
        dy = (y1 - y0) * depth / 2
        return (int(round(x0 + dx)), int(round(y0 + dy)),
                int(round(x1 - dx)), int(round(y1 - dy)))
    if kind == "disc":
        cx, cy, r = params
        return (cx, cy, r * keep)
    px, py, nx, ny, hw = params
    return (px, py, nx, ny, hw * keep)


def _draw_shading(rng, amount: float):
    if amount <= 0:
        return None
    theta = float(rng.uniform(0, 2 * math.pi))
    amps = tuple(float(a) for a in rng.uniform(-amount, amount, 3))
    return (math.cos(theta), math.sin(theta), amps)


def _shade_field(shading, width: int, height: int) -> np.ndarray:
    """Per-pixel drift in [-amp, amp] per channel along the shade direction."""
    nx, ny, amps = shading
    ys, xs = np.mgrid[0:height, 0:width]
    proj = xs * nx + ys * ny
    span = proj.max() - proj.min()
    unit = (proj - proj.min()) / span - 0.5 if span > 0 else np.zeros_like(proj, dtype=float)
    return unit[:, :, None] * (2.0 * np.asarray(amps))


def _paint(target: np.ndarray, shape: Shape, value: int, visible: bool = False) -> None:
    h, w = target.shape
    params = shape.params
    if visible and shape.visible_params is not None:
        params = shape.visible_params
    ys, xs = np.mgrid[0:h, 0:w]
    if shape.kind == "rectangle":
        x0, y0, x1, y1 = params
        target[max(y0, 0) : y1, max(x0, 0) : x1] = value
        return
    if shape.kind == "disc":
        cx, cy, r = params
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    else:
        px, py, nx, ny, hw = params
        inside = np.abs((xs - px) * nx + (ys - py) * ny) <= hw
    target[inside] = value


def gen_synthetic_scene(spec: SyntheticSceneSpec, seed: int) -> tuple[RasterImage, ClassMask]:
    """Generate one scene deterministically from (spec, seed)."""
    shapes = sample_shapes(spec, seed)
    top = np.zeros((spec.height, spec.width), dtype=np.int64)  # 0 = background
    top_visible = np.zeros((spec.height, spec.width), dtype=np.int64)
    for i, shape in enumerate(shapes):
        _paint(top, shape, i + 1)
        _paint(top_visible, shape, i + 1, visible=True)
    class_lut = np.zeros(len(shapes) + 1, dtype=np.uint8)
    color_lut = np.zeros((len(shapes) + 1, 3), dtype=np.float64)
    color_lut[0] = spec.base_colors[0]
    for i, shape in enumerate(shapes):
        class_lut[i + 1] = shape.class_id
        color_lut[i + 1] = shape.color if shape.color is not None else spec.base_colors[shape.class_id]
    classes = class_lut[top]
    canvas = color_lut[top_visible]
    if spec.shape_shading > 0:
        bg_rng = np.random.default_rng(seed + 2_000_003)
        shadings = [_draw_shading(bg_rng, spec.shape_shading)] + [s.shading for s in shapes]
        for region, shading in enumerate(shadings):
            if shading is None:
                continue
            member = top_visible == region
            if member.any():
                canvas[member] += _shade_field(shading, spec.width, spec.height)[member]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed + 1_000_003)
        canvas = canvas + rng.normal(0.0, spec.noise_sigma, canvas.shape)
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return RasterImage(pixels), ClassMask(classes, NUM_CLASSES)
