"""A small fully convolutional segmentation net with hand-written backprop.

Three 3x3 stride-1 zero-padded convolutions (3 -> 16 -> 32 -> C) with ReLU
between them and a per-pixel softmax head. Everything is float64; gradients
are exact (they are checked against finite differences in the tests).

Internally activations are channel-last. Hidden convolutions run as one GEMM
over an im2col patch matrix; the narrow class head multiplies the padded
activation by each kernel tap separately, which avoids GEMMs with a
tiny inner dimension. Input gradients flow through the standard
transposed-convolution identity (im2col of the upstream gradient times the
flipped kernel); weight gradients reuse whichever patch matrix is already
in hand. Buffer allocation dominates at desk scale, so the training loop
passes a Workspace that recycles every large array; without one, each call
allocates fresh buffers and is safe to interleave.

The public interface speaks (N, C, H, W) like the loss and metrics do.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .validation import check_finite

try:  # patch-matrix gather is pure data movement; JIT it when numba is present
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

HIDDEN_CHANNELS = (16, 32)
KERNEL = 3
TAPS = KERNEL * KERNEL


class Workspace:
    """Named scratch buffers, recycled across forward/backward calls.

    A forward's cache aliases workspace memory: run its backward before the
    next forward that shares the workspace.
    """

    def __init__(self):
        self._buffers: dict = {}

    def get(self, name: str, shape: tuple) -> np.ndarray:
        buf = self._buffers.get(name)
        if buf is None or buf.shape != shape:
            buf = np.zeros(shape)
            self._buffers[name] = buf
        return buf


def _pad_into(act: np.ndarray, ws: Workspace | None, name: str) -> np.ndarray:
    """Zero-pad (N, H, W, C) by one pixel; the border is only ever zero."""
    n, h, w, c = act.shape
    if ws is None:
        xp = np.zeros((n, h + 2, w + 2, c))
    else:
        xp = ws.get(name, (n, h + 2, w + 2, c))
    xp[:, 1 : h + 1, 1 : w + 1, :] = act
    return xp


if _HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _gather_patches(act, col6):  # pragma: no cover - jitted
        n, h, w, c = act.shape
        for t in prange(n * h):
            ni = t // h
            y = t % h
            for x in range(w):
                for ky in range(KERNEL):
                    yy = y + ky - 1
                    for kx in range(KERNEL):
                        xx = x + kx - 1
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(c):
                                col6[ni, y, x, ky, kx, ci] = act[ni, yy, xx, ci]
                        else:
                            for ci in range(c):
                                col6[ni, y, x, ky, kx, ci] = 0.0


def _gather_patches_numpy(act, col6):
    n, h, w, c = act.shape
    for ky in range(KERNEL):
        dy = ky - 1
        y0, y1 = max(0, -dy), h - max(0, dy)
        for kx in range(KERNEL):
            dx = kx - 1
            x0, x1 = max(0, -dx), w - max(0, dx)
            tap = col6[:, :, :, ky, kx, :]
            if y0:
                tap[:, :y0] = 0.0
            if y1 < h:
                tap[:, y1:] = 0.0
            if x0:
                tap[:, y0:y1, :x0] = 0.0
            if x1 < w:
                tap[:, y0:y1, x1:] = 0.0
            tap[:, y0:y1, x0:x1] = act[:, y0 + dy : y1 + dy, x0 + dx : x1 + dx, :]


def _im2col(act: np.ndarray, ws: Workspace | None, tag: str) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9C) patch matrix, tap-major columns."""
    n, h, w, c = act.shape
    if ws is None:
        col = np.empty((n * h * w, TAPS * c))
    else:
        col = ws.get(f"col_{tag}", (n * h * w, TAPS * c))
    col6 = col.reshape(n, h, w, KERNEL, KERNEL, c)
    if _HAVE_NUMBA:
        _gather_patches(np.ascontiguousarray(act), col6)
    else:
        _gather_patches_numpy(act, col6)
    return col


def _flipped_kernel(kernel: np.ndarray) -> np.ndarray:
    """(3, 3, Cin, Cout) -> (9*Cout, Cin) operator of the transposed conv."""
    return np.ascontiguousarray(
        kernel[::-1, ::-1].transpose(0, 1, 3, 2)
    ).reshape(TAPS * kernel.shape[3], kernel.shape[2])


@dataclass
class ToyNet:
    """Parameter container; kernels are (3, 3, Cin, Cout), biases (Cout,)."""

    num_classes: int = 5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")
        if not self.params:
            self.params = {
                name: np.zeros(shape) for name, shape in self.param_shapes().items()
            }

    def channel_plan(self) -> tuple:
        return (3,) + HIDDEN_CHANNELS + (self.num_classes,)

    def param_shapes(self) -> dict:
        chans = self.channel_plan()
        shapes = {}
        for layer, (cin, cout) in enumerate(zip(chans[:-1], chans[1:]), start=1):
            shapes[f"w{layer}"] = (KERNEL, KERNEL, cin, cout)
            shapes[f"b{layer}"] = (cout,)
        return shapes

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ToyNet":
        return ToyNet(self.num_classes, {k: v.copy() for k, v in self.params.items()})


def init_params(num_classes: int, seed: int) -> ToyNet:
    """Kaiming-uniform hidden layers; the final layer starts at zero so the
    initial prediction is uniform 1/C everywhere."""
    net = ToyNet(num_classes)
    rng = np.random.default_rng(seed)
    shapes = net.param_shapes()
    last = max(int(name[1:]) for name in shapes if name.startswith("w"))
    for layer in range(1, last):
        wshape = shapes[f"w{layer}"]
        fan_in = wshape[0] * wshape[1] * wshape[2]
        bound = np.sqrt(6.0 / fan_in)
        net.params[f"w{layer}"] = rng.uniform(-bound, bound, size=wshape)
    return net


def net_forward(net: ToyNet, images: np.ndarray, workspace: Workspace | None = None) -> tuple:
    """Images (N, 3, H, W) in [0, 1] -> (probabilities (N, C, H, W), cache)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DataError(f"expected (N, 3, H, W) images, got shape {x.shape}")
    check_finite(x, "images")
    n, _, h, w = x.shape
    ws = workspace
    act = x.transpose(0, 2, 3, 1)  # NHWC
    chans = net.channel_plan()
    n_layers = len(chans) - 1
    cols = []
    relu_masks = []
    for layer in range(1, n_layers):
        cin, cout = chans[layer - 1], chans[layer]
        col = _im2col(act, ws, str(layer))
        cols.append(col)
        kernel = net.params[f"w{layer}"].reshape(TAPS * cin, cout)
        if ws is None:
            z = col @ kernel
        else:
            z = np.dot(col, kernel, out=ws.get(f"z{layer}", (col.shape[0], cout)))
        z += net.params[f"b{layer}"]
        z = z.reshape(n, h, w, cout)
        if ws is None:
            mask = z > 0
        else:
            mask = np.greater(z, 0.0, out=ws.get(f"mask{layer}", z.shape))
        relu_masks.append(mask)
        np.multiply(z, mask, out=z)
        act = z

    # class head: one GEMM per kernel tap over the padded activation, summed
    # over shifted slices (the class count is too small for a good im2col GEMM)
    last = n_layers
    cin, cout = chans[-2], chans[-1]
    head_in = act
    xp = _pad_into(act, ws, f"xp_{last}")
    xp_flat = xp.reshape(-1, cin)
    head_w = net.params[f"w{last}"]
    if ws is None:
        taps = np.empty((TAPS, xp_flat.shape[0], cout))
    else:
        taps = ws.get("taps", (TAPS, xp_flat.shape[0], cout))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            np.dot(xp_flat, head_w[ky, kx], out=taps[ky * KERNEL + kx])
    if ws is None:
        z = np.zeros((n, h, w, cout))
    else:
        z = ws.get(f"z{last}", (n, h, w, cout))
        z.fill(0.0)
    taps_grid = taps.reshape(TAPS, n, h + 2, w + 2, cout)
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            z += taps_grid[ky * KERNEL + kx, :, ky : ky + h, kx : kx + w, :]
    z += net.params[f"b{last}"]

    # per-pixel softmax over the class axis (numerically stabilized)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    cache = {
        "cols": cols,
        "relu_masks": relu_masks,
        "head_in": head_in,
        "probs_nhwc": z,
        "shape": (n, h, w),
    }
    return z.transpose(0, 3, 1, 2), cache


def net_backward(
    net: ToyNet, cache: dict, dprobs: np.ndarray, workspace: Workspace | None = None
) -> dict:
    """Gradient of the loss w.r.t. every parameter, given dL/d(probabilities)."""
    n, h, w = cache["shape"]
    ws = workspace
    chans = net.channel_plan()
    n_layers = len(chans) - 1
    dprobs = np.asarray(dprobs, dtype=np.float64)
    if dprobs.shape != (n, chans[-1], h, w):
        raise DataError(
            f"loss gradient shape {dprobs.shape} does not match forward cache"
        )
    probs = cache["probs_nhwc"]
    dp = dprobs.transpose(0, 2, 3, 1)
    # softmax Jacobian-vector product
    dz = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))

    grads = {}
    # class head: weight gradient from the patch matrix of the upstream
    # gradient (built here, reused below for the input gradient)
    last = n_layers
    cin, cout = chans[-2], chans[-1]
    gcols = _im2col(dz, ws, f"g{last}")
    head_in_flat = cache["head_in"].reshape(n * h * w, cin)
    mixed = head_in_flat.T @ gcols  # (Cin, 9*Cout), taps mirrored
    grads[f"w{last}"] = np.ascontiguousarray(
        mixed.reshape(cin, KERNEL, KERNEL, cout)[:, ::-1, ::-1].transpose(1, 2, 0, 3)
    )
    grads[f"b{last}"] = dz.sum(axis=(0, 1, 2))

    for layer in range(n_layers - 1, 0, -1):
        cin, cout = chans[layer - 1], chans[layer]
        # input gradient of the layer above = transposed conv of its dz
        flip = _flipped_kernel(net.params[f"w{layer + 1}"])
        if ws is None:
            dact = gcols @ flip
        else:
            dact = np.dot(gcols, flip, out=ws.get(f"dact{layer}", (n * h * w, cout)))
        mask = cache["relu_masks"][layer - 1]
        if ws is None:
            dz = dact.reshape(mask.shape) * mask
        else:
            dz = np.multiply(
                dact.reshape(mask.shape), mask, out=ws.get(f"dz{layer}", mask.shape)
            )
        dzf = dz.reshape(n * h * w, cout)
        col = cache["cols"][layer - 1]
        grads[f"w{layer}"] = (col.T @ dzf).reshape(KERNEL, KERNEL, cin, cout)
        grads[f"b{layer}"] = dzf.sum(axis=0)
        if layer > 1:
            gcols = _im2col(dz, ws, f"g{layer}")
    return grads


def predict(
    net: ToyNet,
    images: np.ndarray,
    batch_size: int = 8,
    workspace: Workspace | None = None,
) -> np.ndarray:
    """Argmax class per pixel, (N, H, W) uint8, evaluated batch-wise."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        # workspaces are shape-keyed; skip recycling for a ragged tail batch
        ws = workspace if len(batch) == batch_size else None
        probs, _ = net_forward(net, batch, ws)
        out.append(np.argmax(probs, axis=1).astype(np.uint8))
    return np.concatenate(out) if out else np.empty((0,), dtype=np.uint8)
