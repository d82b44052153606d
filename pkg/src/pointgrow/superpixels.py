"""Superpixel engine: grid affinity graph, hierarchical agglomeration, K-extraction.

The full merge hierarchy is computed once per image (O(E log E) greedy
best-first with lazy deletion); any K-region partition is then an O(P)
prefix replay, which is what makes an interactive K slider viable.
"""

import heapq
import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, MalformedPNGError, MissingFileError
from .raster import EdgeMap, RasterImage, sobel_edges
from .validation import check_same_shape

MAX_PNG_REGIONS = 65535  # 16-bit grayscale id map

SPHX_MAGIC = b"SPHX"
SPHX_VERSION = 1


@dataclass
class SuperpixelConfig:
    """Knobs for both backends; defaults follow the best ablation cells."""

    k: int = 100
    edge: bool = False
    sigma: float = 1.0  # color dissimilarity scale, channel units
    beta: float = 0.5  # size-balance exponent
    backend: str = "agglomerative"
    slic_compactness: float = 10.0
    slic_iterations: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise DataError("k must be >= 1")
        if self.sigma <= 0:
            raise DataError("sigma must be > 0")
        if not 0.0 <= self.beta <= 1.0:
            raise DataError("beta must lie in [0, 1]")
        if self.backend not in ("agglomerative", "slic"):
            raise DataError(f"unknown backend {self.backend!r}")
        if self.slic_iterations < 1:
            raise DataError("slic iterations must be >= 1")


@dataclass
class AffinityGraph:
    """4-connected pixel grid as a region adjacency graph.

    Edge ``scores`` are the color dissimilarity (scaled by the boundary
    multiplier when the edge option is on); ``multipliers`` keep the boundary
    factor separate so agglomeration can reapply it to recomputed costs.
    """

    num_nodes: int
    sizes: np.ndarray  # (P,) int64 region pixel counts
    color_sums: np.ndarray  # (P, 3) int64 per-channel accumulators
    edges_u: np.ndarray  # (E,) int64
    edges_v: np.ndarray  # (E,) int64
    scores: np.ndarray  # (E,) float64 dissimilarity >= 0
    multipliers: np.ndarray  # (E,) float64 boundary factors >= 1


@dataclass
class MergeHierarchy:
    """Full agglomeration record: exactly P-1 merges from pixels to one region.

    Merge i consumes regions ``a[i]`` and ``b[i]`` and creates region
    ``P + i``. Scores are the cost at merge time and need not be monotone;
    extraction is defined by merge order alone. ``region_sizes`` and
    ``region_color_sums`` cover every region id ever created and are None for
    hierarchies loaded from disk.
    """

    num_pixels: int
    a: np.ndarray  # (P-1,) uint32
    b: np.ndarray
    new: np.ndarray
    scores: np.ndarray  # (P-1,) float64
    region_sizes: np.ndarray | None = field(default=None, repr=False)
    region_color_sums: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.a)


@dataclass
class SuperpixelMap:
    """Region id per pixel; ids are the contiguous range 0..k-1."""

    labels: np.ndarray  # (H, W) int32
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DataError("superpixel labels must be 2-D")
        self.labels = labels.astype(np.int32, copy=False)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


def build_grid_graph(
    image: RasterImage,
    edges: EdgeMap | None = None,
    config: SuperpixelConfig | None = None,
) -> AffinityGraph:
    """One node per pixel, one edge per 4-neighbor pair.

    Dissimilarity is the Euclidean RGB distance over sigma; with the edge
    option it is additionally scaled by (1 + g), g being the larger of the
    two pixels' edge magnitudes.
    """
    config = config or SuperpixelConfig()
    h, w = image.height, image.width
    if config.edge and edges is None:
        edges = sobel_edges(image)
    if edges is not None:
        check_same_shape(edges.magnitude, image.pixels[:, :, 0], "edge map and image")

    px = image.pixels.astype(np.int64)
    ids = np.arange(h * w, dtype=np.int64).reshape(h, w)

    def pair_arrays(ua, va):
        ua = ua.ravel()
        va = va.ravel()
        diff = px.reshape(-1, 3)[ua] - px.reshape(-1, 3)[va]
        dist = np.sqrt((diff * diff).sum(axis=1)) / config.sigma
        mult = np.ones(len(ua))
        if config.edge:
            g = np.maximum(edges.magnitude.ravel()[ua], edges.magnitude.ravel()[va])
            mult = 1.0 + g
        return ua, va, dist * mult, mult

    horiz = pair_arrays(ids[:, :-1], ids[:, 1:])
    vert = pair_arrays(ids[:-1, :], ids[1:, :])
    edges_u = np.concatenate([horiz[0], vert[0]])
    edges_v = np.concatenate([horiz[1], vert[1]])
    scores = np.concatenate([horiz[2], vert[2]])
    multipliers = np.concatenate([horiz[3], vert[3]])

    return AffinityGraph(
        num_nodes=h * w,
        sizes=np.ones(h * w, dtype=np.int64),
        color_sums=px.reshape(-1, 3).copy(),
        edges_u=edges_u,
        edges_v=edges_v,
        scores=scores,
        multipliers=multipliers,
    )


def agglomerate(graph: AffinityGraph, config: SuperpixelConfig | None = None) -> MergeHierarchy:
    """Greedy best-first merging of the cheapest adjacent region pair.

    Merge cost is ``|mean_color(A) - mean_color(B)| / sigma *
    (|A||B| / (|A|+|B|))**beta`` times the pair's boundary multiplier.
    Costs are recomputed from exact region statistics after every merge;
    stale heap entries (a dead endpoint) are discarded on pop. Ties prefer
    the lexicographically smaller (min id, max id) pair, which makes the
    hierarchy fully deterministic.
    """
    config = config or SuperpixelConfig()
    p = graph.num_nodes
    if p == 0:
        raise DataError("cannot agglomerate an empty graph")
    n_total = 2 * p - 1
    beta = config.beta
    sigma = config.sigma

    size = np.zeros(n_total, dtype=np.int64)
    size[:p] = graph.sizes
    csum = np.zeros((n_total, 3), dtype=np.int64)
    csum[:p] = graph.color_sums
    mean = np.zeros((n_total, 3), dtype=np.float64)
    mean[:p] = csum[:p] / size[:p, None]

    alive = np.zeros(n_total, dtype=bool)
    alive[:p] = True

    # adjacency: region id -> {neighbor id: boundary multiplier}
    adj: list = [dict() for _ in range(p)] + [None] * (p - 1)
    for u, v, mult in zip(
        graph.edges_u.tolist(), graph.edges_v.tolist(), graph.multipliers.tolist()
    ):
        if u == v or not (0 <= u < p and 0 <= v < p):
            raise DataError("graph edges must join distinct pixel nodes")
        adj[u][v] = mult
        adj[v][u] = mult

    mr, mg, mb = mean[:, 0], mean[:, 1], mean[:, 2]
    sz = size

    def cost(ra: int, rb: int, mult: float) -> float:
        dr = mr[ra] - mr[rb]
        dg = mg[ra] - mg[rb]
        db = mb[ra] - mb[rb]
        color = math.sqrt(dr * dr + dg * dg + db * db) / sigma
        sa = sz[ra]
        sb = sz[rb]
        return color * (sa * sb / (sa + sb)) ** beta * mult

    heap = []
    for u in range(p):
        for v, mult in adj[u].items():
            if u < v:
                heap.append((cost(u, v, mult), u, v))
    heapq.heapify(heap)

    merges_a = np.empty(p - 1, dtype=np.uint32)
    merges_b = np.empty(p - 1, dtype=np.uint32)
    merges_new = np.empty(p - 1, dtype=np.uint32)
    merge_scores = np.empty(p - 1, dtype=np.float64)

    pop = heapq.heappop
    push = heapq.heappush
    for m in range(p - 1):
        while True:
            if not heap:
                raise DataError("graph is not connected")
            c, u, v = pop(heap)
            if alive[u] and alive[v]:
                break
        new = p + m
        merges_a[m] = u
        merges_b[m] = v
        merges_new[m] = new
        merge_scores[m] = c
        alive[u] = False
        alive[v] = False
        alive[new] = True
        sz[new] = sz[u] + sz[v]
        csum[new] = csum[u] + csum[v]
        mean[new] = csum[new] / sz[new]

        au = adj[u]
        av = adj[v]
        au.pop(v, None)
        av.pop(u, None)
        if len(au) > len(av):
            au, av = av, au
        for n, mult in au.items():
            prev = av.get(n)
            if prev is None or mult > prev:
                av[n] = mult
        adj[new] = av
        adj[u] = None
        adj[v] = None
        for n, mult in av.items():
            an = adj[n]
            an.pop(u, None)
            an.pop(v, None)
            an[new] = mult
            push(heap, (cost(new, n, mult), n, new))

    return MergeHierarchy(
        num_pixels=p,
        a=merges_a,
        b=merges_b,
        new=merges_new,
        scores=merge_scores,
        region_sizes=size,
        region_color_sums=csum,
    )


def extract_k(hierarchy: MergeHierarchy, k: int, width: int, height: int) -> SuperpixelMap:
    """Partition at exactly k regions by replaying the first P-k merges.

    Surviving regions are relabeled 0..k-1 in raster-scan order of each
    region's first pixel.
    """
    p = hierarchy.num_pixels
    if width * height != p:
        raise DataError(f"hierarchy covers {p} pixels, not {width}x{height}")
    if not 1 <= k <= p:
        raise DataError(f"k must lie in [1, {p}], got {k}")
    m = p - k
    parent = np.arange(p + m, dtype=np.int64)
    if m:
        parent[hierarchy.a[:m].astype(np.int64)] = hierarchy.new[:m].astype(np.int64)
        parent[hierarchy.b[:m].astype(np.int64)] = hierarchy.new[:m].astype(np.int64)
        # consumed ids are always smaller than the region that absorbs them,
        # so pointer jumping converges in O(log depth) passes
        while True:
            grand = parent[parent]
            if np.array_equal(grand, parent):
                break
            parent = grand
    roots = parent[:p]
    uniq, first_idx, inverse = np.unique(roots, return_index=True, return_inverse=True)
    if len(uniq) != k:
        raise DataError(f"hierarchy is inconsistent: got {len(uniq)} regions for k={k}")
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(len(uniq))
    labels = rank[inverse].reshape(height, width)
    return SuperpixelMap(labels.astype(np.int32), k)


def compute_hierarchy(
    image: RasterImage,
    config: SuperpixelConfig | None = None,
    edges: EdgeMap | None = None,
) -> MergeHierarchy:
    """Convenience: grid graph + agglomeration in one call."""
    config = config or SuperpixelConfig()
    return agglomerate(build_grid_graph(image, edges, config), config)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHI")
_RECORD_DTYPE = np.dtype([("a", "<u4"), ("b", "<u4"), ("new", "<u4"), ("score", "<f8")])


def save_hierarchy(hierarchy: MergeHierarchy, path) -> None:
    records = np.empty(len(hierarchy), dtype=_RECORD_DTYPE)
    records["a"] = hierarchy.a
    records["b"] = hierarchy.b
    records["new"] = hierarchy.new
    records["score"] = hierarchy.scores
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SPHX_MAGIC, SPHX_VERSION, hierarchy.num_pixels))
        fh.write(records.tobytes())


def load_hierarchy(path) -> MergeHierarchy:
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated hierarchy header")
    magic, version, p = _HEADER.unpack_from(blob)
    if magic != SPHX_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SPHX_VERSION:
        raise DataError(f"{path}: unsupported hierarchy version {version}")
    body = blob[_HEADER.size :]
    expect = (p - 1) * _RECORD_DTYPE.itemsize
    if len(body) != expect:
        raise DataError(f"{path}: truncated hierarchy body ({len(body)} != {expect} bytes)")
    records = np.frombuffer(body, dtype=_RECORD_DTYPE)
    new = records["new"].astype(np.uint32)
    if len(new) and not np.array_equal(new, p + np.arange(len(new), dtype=np.uint32)):
        raise DataError(f"{path}: merge records out of order")
    return MergeHierarchy(
        num_pixels=int(p),
        a=records["a"].astype(np.uint32),
        b=records["b"].astype(np.uint32),
        new=new,
        scores=records["score"].astype(np.float64),
    )


def write_superpixel_map(spmap: SuperpixelMap, path) -> None:
    """Persist as 16-bit grayscale PNG, pixel value = region id."""
    if spmap.k > MAX_PNG_REGIONS:
        raise DataError(
            f"16-bit id map supports at most {MAX_PNG_REGIONS} regions, got {spmap.k}"
        )
    Image.fromarray(spmap.labels.astype(np.uint16)).save(path, format="PNG")


def encode_superpixel_png(spmap: SuperpixelMap) -> bytes:
    if spmap.k > MAX_PNG_REGIONS:
        raise DataError(
            f"16-bit id map supports at most {MAX_PNG_REGIONS} regions, got {spmap.k}"
        )
    buf = io.BytesIO()
    Image.fromarray(spmap.labels.astype(np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def read_superpixel_map(path) -> SuperpixelMap:
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise MalformedPNGError(f"cannot decode PNG {path}: {exc}") from exc
    if img.mode not in ("I;16", "I"):
        raise DataError(f"{path}: expected 16-bit grayscale id map, got mode {img.mode!r}")
    labels = np.asarray(img, dtype=np.int64)
    uniq = np.unique(labels)
    k = len(uniq)
    if not np.array_equal(uniq, np.arange(k)):
        raise DataError(f"{path}: region ids are not the contiguous range 0..{k - 1}")
    return SuperpixelMap(labels.astype(np.int32), k)


def boundary_runs(spmap: SuperpixelMap) -> list:
    """Run-length encode boundary pixels (any 4-neighbor in another region).

    Returns [start, length] pairs over the row-major flattened image.
    """
    lab = spmap.labels
    boundary = np.zeros(lab.shape, dtype=bool)
    boundary[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    boundary[:, 1:] |= lab[:, :-1] != lab[:, 1:]
    boundary[:-1, :] |= lab[:-1, :] != lab[1:, :]
    boundary[1:, :] |= lab[:-1, :] != lab[1:, :]
    flat = boundary.ravel()
    if not flat.any():
        return []
    diffs = np.diff(flat.astype(np.int8))
    starts = np.flatnonzero(diffs == 1) + 1
    ends = np.flatnonzero(diffs == -1) + 1
    if flat[0]:
        starts = np.concatenate([[0], starts])
    if flat[-1]:
        ends = np.concatenate([ends, [flat.size]])
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]
