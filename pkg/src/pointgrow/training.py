"""Training loop, evaluation, and checkpoint persistence for the toy net."""

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import (
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DataError,
    NumericError,
)
from .losses import ClassWeights, masked_loss_backward, masked_loss_forward, one_hot
from .metrics import confusion_matrix, metrics_report, miou_from_confusion
from .optim import Adam
from .toynet import ToyNet, Workspace, init_params, net_backward, net_forward, predict

CKPT_MAGIC = b"TNCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DataError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise DataError("batch size must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise DataError("plateau factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise DataError("plateau patience must be >= 1")


@dataclass
class TrainResult:
    log: list
    best_net: ToyNet
    best_val_miou: float
    best_epoch: int
    final_net: ToyNet = field(repr=False, default=None)


def normalize_images(pixels_batch: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W, 3) -> float64 (N, 3, H, W) in [0, 1].

    The result is a view of channel-last memory, which the net's internal
    channel-last layout turns back into contiguous access for free.
    """
    arr = np.ascontiguousarray(np.asarray(pixels_batch, dtype=np.float64) / 255.0)
    return arr.transpose(0, 3, 1, 2)


def train(
    net: ToyNet,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    train_supervised: np.ndarray,
    val_images: np.ndarray,
    val_masks: np.ndarray,
    weights: ClassWeights,
    config: TrainConfig,
    log_path=None,
) -> TrainResult:
    """Seeded mini-batch Adam training with a val-mIoU plateau scheduler.

    train_images: (N, 3, H, W) in [0, 1]; train_labels: integer (N, H, W);
    train_supervised: binary (N, H, W); val_masks: integer ground truth.
    The best-validation parameters are retained. Deterministic for a fixed
    (config, seed) in single-threaded use.
    """
    n = len(train_images)
    if n == 0 or len(val_images) == 0:
        raise DataError("train and val splits must be non-empty")
    targets = one_hot(train_labels, net.num_classes)
    supervised = np.asarray(train_supervised, dtype=np.float64)

    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    best_miou = -1.0
    best_epoch = 0
    best_net = net.copy()
    since_improve = 0
    log = []
    workspace = Workspace()
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        # multi-threaded BLAS fights the gather kernels' thread pool at these
        # small GEMM sizes; a single BLAS thread is strictly faster here
        with threadpool_limits(limits=1, user_api="blas"):
            for epoch in range(1, config.epochs + 1):
                order = rng.permutation(n)
                loss_sum = 0.0
                optimizer.lr = lr
                for start in range(0, n, config.batch_size):
                    idx = order[start : start + config.batch_size]
                    batch_ws = workspace if len(idx) == config.batch_size else None
                    probs, cache = net_forward(net, train_images[idx], batch_ws)
                    loss = masked_loss_forward(probs, targets[idx], supervised[idx], weights)
                    if not np.isfinite(loss.total):
                        raise NumericError(
                            f"non-finite training loss at epoch {epoch} "
                            f"(batch start {start}); aborting"
                        )
                    loss_sum += float(loss.per_sample.sum())
                    dprobs = masked_loss_backward(probs, targets[idx], supervised[idx], weights)
                    grads = net_backward(net, cache, dprobs, batch_ws)
                    optimizer.step(net.params, grads)
                val_miou = _pooled_miou(net, val_images, val_masks, config.batch_size, workspace)
                record = {
                    "epoch": epoch,
                    "train_loss": loss_sum / n,
                    "val_miou": val_miou,
                    "lr": lr,
                }
                log.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if val_miou > best_miou:
                    best_miou = val_miou
                    best_epoch = epoch
                    best_net = net.copy()
                    since_improve = 0
                else:
                    since_improve += 1
                    if since_improve >= config.plateau_patience:
                        lr *= config.plateau_factor
                        since_improve = 0
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(log, best_net, best_miou, best_epoch, final_net=net)


def _pooled_miou(net, images, masks, batch_size, workspace=None) -> float:
    pred = predict(net, images, batch_size, workspace)
    pooled = np.zeros((net.num_classes, net.num_classes), dtype=np.int64)
    for p, g in zip(pred, masks):
        pooled += confusion_matrix(p, g, net.num_classes)
    return miou_from_confusion(pooled, ignore_index=0)


def evaluate(net: ToyNet, images: np.ndarray, masks: np.ndarray, batch_size: int = 8) -> dict:
    """Pooled-confusion metrics report over a split."""
    if len(images) == 0:
        raise DataError("cannot evaluate an empty split")
    pred = predict(net, images, batch_size)
    pooled = np.zeros((net.num_classes, net.num_classes), dtype=np.int64)
    for p, g in zip(pred, masks):
        pooled += confusion_matrix(p, g, net.num_classes)
    return metrics_report(pooled, ignore_index=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_HEAD = struct.Struct("<4sH")


def save_checkpoint(net: ToyNet, optimizer: Adam, epoch: int, rng_state: dict, path) -> None:
    """Binary snapshot: params and Adam moments as little-endian float64."""
    buf = io.BytesIO()
    buf.write(_HEAD.pack(CKPT_MAGIC, CKPT_VERSION))
    chans = net.channel_plan()
    buf.write(struct.pack("<I", len(chans)))
    buf.write(struct.pack(f"<{len(chans)}I", *chans))
    buf.write(struct.pack("<IQd", epoch, optimizer.t, optimizer.lr))
    state_blob = json.dumps(rng_state, sort_keys=True, default=int).encode()
    buf.write(struct.pack("<I", len(state_blob)))
    buf.write(state_blob)
    for name in sorted(net.params):
        buf.write(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())
    for moment in (optimizer.m, optimizer.v):
        for name in sorted(net.params):
            arr = moment.get(name)
            if arr is None:
                arr = np.zeros_like(net.params[name])
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple:
    """Returns (net, optimizer, epoch, rng_state); bit-exact round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointTruncatedError(f"{path}: checkpoint truncated at byte {off}")
        chunk = view[off : off + n]
        off += n
        return chunk

    magic, version = _HEAD.unpack(take(_HEAD.size))
    if magic != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    (n_chans,) = struct.unpack("<I", take(4))
    chans = struct.unpack(f"<{n_chans}I", take(4 * n_chans))
    epoch, t, lr = struct.unpack("<IQd", take(20))
    (state_len,) = struct.unpack("<I", take(4))
    rng_state = json.loads(bytes(take(state_len)).decode())

    net = ToyNet(num_classes=int(chans[-1]))
    if tuple(int(c) for c in chans) != net.channel_plan():
        raise CheckpointVersionError(f"{path}: unsupported architecture {chans}")
    optimizer = Adam(lr)
    optimizer.t = t

    def read_arrays() -> dict:
        out = {}
        shapes = net.param_shapes()
        for name in sorted(shapes):
            shape = shapes[name]
            count = int(np.prod(shape))
            arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
        return out

    net.params = read_arrays()
    optimizer.m = read_arrays()
    optimizer.v = read_arrays()
    if off != len(blob):
        raise CheckpointTruncatedError(f"{path}: {len(blob) - off} trailing bytes")
    return net, optimizer, int(epoch), rng_state


def fresh_net(num_classes: int, seed: int) -> ToyNet:
    return init_params(num_classes, seed)
