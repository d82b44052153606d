"""SLIC backend: grid-seeded local k-means over color+position.

Alternate superpixel generator used to cross-check the agglomerative engine.
Works in RGB; the final region count may differ from the requested k after
the connectivity post-pass and is reported in the result.
"""

import math

import numpy as np
from scipy import ndimage

from .errors import DataError
from .raster import RasterImage, sobel_edges
from .superpixels import SuperpixelConfig, SuperpixelMap


def _seed_grid(width: int, height: int, k: int) -> np.ndarray:
    step = math.sqrt(width * height / k)
    nx = max(1, int(round(width / step)))
    ny = max(1, int(round(height / step)))
    xs = (np.arange(nx) + 0.5) * (width / nx)
    ys = (np.arange(ny) + 0.5) * (height / ny)
    grid = [(x, y) for y in ys for x in xs]
    return np.array(grid, dtype=np.float64)


def _perturb_to_low_gradient(seeds: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    h, w = gradient.shape
    out = seeds.copy()
    for i, (sx, sy) in enumerate(seeds):
        cx = min(max(int(sx), 0), w - 1)
        cy = min(max(int(sy), 0), h - 1)
        x0, x1 = max(cx - 1, 0), min(cx + 2, w)
        y0, y1 = max(cy - 1, 0), min(cy + 2, h)
        window = gradient[y0:y1, x0:x1]
        dy, dx = np.unravel_index(np.argmin(window), window.shape)
        out[i] = (x0 + dx, y0 + dy)
    return out


def slic(image: RasterImage, config: SuperpixelConfig | None = None) -> SuperpixelMap:
    """Standard SLIC at the configured k, compactness and iteration count."""
    config = config or SuperpixelConfig()
    h, w = image.height, image.width
    k = config.k
    if k > h * w:
        raise DataError(f"k={k} exceeds pixel count {h * w}")
    if k == 1:
        return SuperpixelMap(np.zeros((h, w), dtype=np.int32), 1)

    px = image.pixels.astype(np.float64)
    gradient = sobel_edges(image).magnitude
    seeds = _perturb_to_low_gradient(_seed_grid(w, h, k), gradient)
    step = math.sqrt(h * w / k)
    ratio = (config.slic_compactness / step) ** 2

    n = len(seeds)
    center_pos = seeds.copy()  # (n, 2) as (x, y)
    center_col = np.empty((n, 3))
    for i, (sx, sy) in enumerate(seeds):
        center_col[i] = px[int(sy), int(sx)]

    ys, xs = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), -1, dtype=np.int64)
    for _ in range(config.slic_iterations):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        reach = int(math.ceil(2 * step))
        for i in range(n):
            cx, cy = center_pos[i]
            x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
            y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
            if x0 >= x1 or y0 >= y1:
                continue
            patch = px[y0:y1, x0:x1]
            dc2 = ((patch - center_col[i]) ** 2).sum(axis=2)
            ds2 = (xs[y0:y1, x0:x1] - cx) ** 2 + (ys[y0:y1, x0:x1] - cy) ** 2
            dist = dc2 + ds2 * ratio
            closer = dist < best[y0:y1, x0:x1]
            best[y0:y1, x0:x1][closer] = dist[closer]
            labels[y0:y1, x0:x1][closer] = i
        # pixels outside every search window fall back to the nearest center
        missing = labels < 0
        if missing.any():
            my, mx = np.nonzero(missing)
            d = (mx[:, None] - center_pos[None, :, 0]) ** 2 + (
                my[:, None] - center_pos[None, :, 1]
            ) ** 2
            labels[my, mx] = np.argmin(d, axis=1)
        for i in range(n):
            member = labels == i
            if member.any():
                center_col[i] = px[member].mean(axis=0)
                center_pos[i] = (xs[member].mean(), ys[member].mean())

    connected = _enforce_connectivity(labels)
    return SuperpixelMap(connected, int(connected.max()) + 1)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each region's largest component; orphans join the dominant neighbor.

    Regions are then relabeled 0..K-1 in raster order of their first pixel.
    """
    h, w = labels.shape
    final = np.full((h, w), -1, dtype=np.int64)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    orphans = []
    for region in np.unique(labels):
        comp, n_comp = ndimage.label(labels == region, structure=structure)
        if n_comp == 0:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        main = int(np.argmax(sizes)) + 1
        final[comp == main] = region
        for c in range(1, n_comp + 1):
            if c != main:
                member = comp == c
                orphans.append((int(np.flatnonzero(member.ravel())[0]), member))
    orphans.sort(key=lambda item: item[0])

    pending = orphans
    while pending:
        deferred = []
        progressed = False
        for first, member in pending:
            neighbor_labels = _neighbor_labels(final, member)
            if neighbor_labels.size == 0:
                deferred.append((first, member))
                continue
            counts = np.bincount(neighbor_labels)
            final[member] = int(np.argmax(counts))
            progressed = True
        if not progressed:
            for _, member in deferred:
                final[member] = 0
            break
        pending = deferred

    uniq, first_idx, inverse = np.unique(final.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(len(uniq))
    return rank[inverse].reshape(h, w).astype(np.int32)


def _neighbor_labels(final: np.ndarray, member: np.ndarray) -> np.ndarray:
    """Assigned labels of pixels 4-adjacent to (but outside) the component."""
    ring = ndimage.binary_dilation(
        member, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    ) & ~member
    values = final[ring]
    return values[values >= 0]
