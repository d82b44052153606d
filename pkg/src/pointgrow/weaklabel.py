"""Query-point sampling and point-to-superpixel label propagation.

Points are the only supervision; each labeled point's class is spread over
its superpixel by majority vote, producing a pseudo-label mask plus a binary
supervision mask saying which pixels enter the loss.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidClassError
from .raster import ClassMask, encode_mask_png, read_mask, write_mask
from .superpixels import SuperpixelMap
from .validation import check_in_bounds

POINT_SOURCES = ("random", "balanced", "manual")
BACKGROUND_POLICIES = ("ignore", "supervise")


@dataclass
class PointAnnotation:
    x: int
    y: int
    class_id: int


@dataclass
class PointSet:
    points: list = field(default_factory=list)
    source: str = "manual"
    seed: int = 0

    def __post_init__(self):
        if self.source not in POINT_SOURCES:
            raise DataError(f"unknown point source {self.source!r}")
        seen = set()
        for pt in self.points:
            key = (pt.x, pt.y)
            if key in seen:
                raise DataError(f"duplicate point at pixel {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PropagationConfig:
    background_policy: str = "ignore"

    def __post_init__(self):
        if self.background_policy not in BACKGROUND_POLICIES:
            raise DataError(f"unknown background policy {self.background_policy!r}")


@dataclass
class PseudoMask:
    """Propagated labels plus the binary supervision mask.

    ``labels`` is a ClassMask; ``supervised`` is (H, W) uint8 in {0, 1}.
    Under the ignore policy every unsupervised pixel carries label 0.
    """

    labels: ClassMask
    supervised: np.ndarray

    def __post_init__(self):
        sup = np.asarray(self.supervised)
        if sup.shape != self.labels.classes.shape:
            raise DataError("labels and supervision mask must share a shape")
        if sup.size and not np.isin(sup, (0, 1)).all():
            raise DataError("supervision mask must be binary")
        self.supervised = sup.astype(np.uint8)


def sample_points_random(gt: ClassMask, p: int, seed: int) -> PointSet:
    """p distinct pixels drawn uniformly without replacement, labeled from gt."""
    total = gt.width * gt.height
    if p > total:
        raise DataError(f"cannot sample {p} points from {total} pixels")
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=p, replace=False)
    ys, xs = np.divmod(flat, gt.width)
    points = [
        PointAnnotation(int(x), int(y), int(gt.classes[y, x]))
        for x, y in zip(xs, ys)
    ]
    return PointSet(points, source="random", seed=seed)


def sample_points_balanced(gt: ClassMask, p: int, seed: int) -> PointSet:
    """Distribute p points as evenly as possible among the classes present.

    Quotas are floor(p / |classes|) with the remainder handed out one point
    at a time in ascending class-id order; classes with fewer pixels than
    their quota are exhausted and the shortfall redistributed round-robin
    among classes that still have capacity.
    """
    if p < 1:
        raise DataError("balanced sampling needs p >= 1")
    total = gt.width * gt.height
    if p > total:
        raise DataError(f"cannot sample {p} points from {total} pixels")
    present = np.unique(gt.classes)
    counts = {int(c): int((gt.classes == c).sum()) for c in present}
    quotas = {int(c): p // len(present) for c in present}
    for c in sorted(quotas)[: p % len(present)]:
        quotas[c] += 1

    # cap at availability, then hand the shortfall around round-robin
    shortfall = 0
    for c in sorted(quotas):
        if quotas[c] > counts[c]:
            shortfall += quotas[c] - counts[c]
            quotas[c] = counts[c]
    while shortfall:
        progressed = False
        for c in sorted(quotas):
            if shortfall and quotas[c] < counts[c]:
                quotas[c] += 1
                shortfall -= 1
                progressed = True
        if not progressed:
            raise DataError("not enough pixels to place the requested points")

    rng = np.random.default_rng(seed)
    points = []
    for c in sorted(quotas):
        if quotas[c] == 0:
            continue
        flat = np.flatnonzero(gt.classes.ravel() == c)
        chosen = rng.choice(flat, size=quotas[c], replace=False)
        ys, xs = np.divmod(chosen, gt.width)
        points.extend(PointAnnotation(int(x), int(y), c) for x, y in zip(xs, ys))
    return PointSet(points, source="balanced", seed=seed)


def propagate(
    points: PointSet,
    spmap: SuperpixelMap,
    config: PropagationConfig | None = None,
    num_classes: int = 5,
) -> PseudoMask:
    """Expand point labels over their superpixels by per-region majority vote.

    Ties go to the smallest class id. Point-free regions get label 0, and
    are excluded from supervision unless the policy is "supervise".
    """
    config = config or PropagationConfig()
    k = spmap.k
    hist = np.zeros((k, num_classes), dtype=np.int64)
    for pt in points.points:
        if pt.class_id >= num_classes or pt.class_id < 0:
            raise InvalidClassError(f"point class {pt.class_id} >= num_classes {num_classes}")
        check_in_bounds(pt.x, pt.y, spmap.width, spmap.height)
        hist[spmap.labels[pt.y, pt.x], pt.class_id] += 1

    has_points = hist.sum(axis=1) > 0
    region_label = np.where(has_points, np.argmax(hist, axis=1), 0).astype(np.uint8)
    labels = region_label[spmap.labels]
    if config.background_policy == "supervise":
        supervised = np.ones(labels.shape, dtype=np.uint8)
    else:
        supervised = has_points[spmap.labels].astype(np.uint8)
    return PseudoMask(ClassMask(labels, num_classes), supervised)


def coverage(pm: PseudoMask) -> float:
    """Fraction of pixels that carry supervision."""
    return float(pm.supervised.mean())


def per_class_point_counts(points: PointSet, num_classes: int) -> list:
    counts = [0] * num_classes
    for pt in points.points:
        counts[pt.class_id] += 1
    return counts


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_points(points: PointSet, csv_path, sidecar_path=None) -> None:
    """CSV with an x,y,class header plus a JSON sidecar carrying provenance."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "class"])
        for pt in points.points:
            writer.writerow([pt.x, pt.y, pt.class_id])
    if sidecar_path is not None:
        with open(sidecar_path, "w") as fh:
            json.dump({"source": points.source, "seed": points.seed}, fh)
            fh.write("\n")


def points_csv_bytes(points: PointSet) -> bytes:
    lines = ["x,y,class"]
    lines.extend(f"{pt.x},{pt.y},{pt.class_id}" for pt in points.points)
    return ("\r\n".join(lines) + "\r\n").encode("ascii")


def load_points(csv_path, sidecar_path=None) -> PointSet:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "class"]:
            raise DataError(f"{csv_path}: expected 'x,y,class' header, got {header}")
        try:
            points = [PointAnnotation(int(x), int(y), int(c)) for x, y, c in reader]
        except ValueError as exc:
            raise DataError(f"{csv_path}: malformed point row: {exc}") from exc
    source, seed = "manual", 0
    if sidecar_path is not None:
        with open(sidecar_path) as fh:
            meta = json.load(fh)
        source = meta.get("source", "manual")
        seed = int(meta.get("seed", 0))
    return PointSet(points, source=source, seed=seed)


def save_pseudo_mask(pm: PseudoMask, stem) -> tuple:
    """Write <stem>.labels.png (class mask) and <stem>.mask.png (0/255)."""
    labels_path = f"{stem}.labels.png"
    mask_path = f"{stem}.mask.png"
    write_mask(pm.labels, labels_path)
    write_mask(ClassMask((pm.supervised * 255).astype(np.uint8), 256), mask_path)
    return labels_path, mask_path


def pseudo_mask_png_bytes(pm: PseudoMask) -> tuple:
    labels = encode_mask_png(pm.labels)
    mask = encode_mask_png(ClassMask((pm.supervised * 255).astype(np.uint8), 256))
    return labels, mask


def load_pseudo_mask(stem, num_classes: int = 5) -> PseudoMask:
    labels = read_mask(f"{stem}.labels.png", num_classes)
    raw = read_mask(f"{stem}.mask.png", 256)
    if raw.classes.size and not np.isin(raw.classes, (0, 255)).all():
        raise DataError(f"{stem}.mask.png: supervision mask must be 0/255")
    return PseudoMask(labels, (raw.classes == 255).astype(np.uint8))
