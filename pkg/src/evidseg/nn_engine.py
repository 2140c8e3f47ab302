"""Small reverse-mode tensor engine, conv segmentation net, ADAM and checkpoints."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dirichlet_core import belief_maps
from .losses import AnnealSchedule, LossBreakdown, LossWeights, kl_weight, loss_and_gradient

# full-scale training values
FULL_SCALE_BATCH_SIZE = 4
FULL_SCALE_ITERATIONS = 80_000
FULL_SCALE_LEARNING_RATE = 3e-4
FULL_SCALE_WEIGHT_DECAY = 1e-4
FULL_SCALE_KL_RAMP = (40_000, 48_000)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"EDLC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class DataContractError(ValueError):
    """Training data violates the in-distribution-only contract."""


# ---------------------------------------------------------------------------
# tensors


class Tensor:
    """Dense array with an optional gradient slot and a recorded backward rule."""

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "", requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._op = op
        self._backward: Callable[[np.ndarray], None] = lambda g: None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = g.astype(self.data.dtype, copy=False)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        if not self._op:
            raise RuntimeError("backward() called on a leaf tensor; run a forward pass first")
        if seed is None:
            if self.data.size != 1:
                raise ValueError(f"backward() on non-scalar of shape {self.shape} needs a seed")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()

        def visit(t: Tensor) -> None:
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        grads: dict[int, np.ndarray] = {id(self): np.broadcast_to(np.asarray(seed, dtype=self.data.dtype), self.shape)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if not t._parents:
                t._accumulate(g)
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r})"


def _pad_flat(x: np.ndarray, k: int) -> np.ndarray:
    # (N, H, W, C) -> zero-padded rows of length C, flattened over (N, Hp, Wp),
    # with a tail so every kernel offset can take a full-length slice
    n, h, w, c = x.shape
    pad = k // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    tail = (k - 1) * wp + (k - 1)
    flat = np.zeros((n * hp * wp + tail, c), dtype=x.dtype)
    flat[: n * hp * wp].reshape(n, hp, wp, c)[:, pad : pad + h, pad : pad + w] = x
    return flat


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 convolution on channels-last activations.

    ``x`` is (N, H, W, Cin); ``weight`` is (k, k, Cin, Cout); ``bias`` is (Cout,).
    Kernel taps are contiguous shifted slices of the flattened padded input;
    outputs landing in padding rows are computed and discarded. The matmul
    layout is picked per layer shape to keep BLAS calls reasonably sized.
    """
    k, _, cin, cout = weight.shape
    if k % 2 != 1 or weight.shape[1] != k:
        raise ValueError(f"kernel must be square and odd, got {weight.shape[:2]}")
    if x.data.ndim != 4 or x.shape[3] != cin:
        raise ValueError(f"input shape {x.shape} incompatible with weight {weight.shape}")
    n, h, w, _ = x.shape
    pad = k // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    total = n * hp * wp
    taps = k * k
    flat = _pad_flat(x.data, k)
    offsets = [dy * wp + dx for dy in range(k) for dx in range(k)]
    wt = weight.data.reshape(taps, cin, cout)
    dtype = np.result_type(x.data, weight.data)
    cols = None
    if taps * cin <= 32:
        # thin input: explicit im2col, reused for the weight gradient
        cols = np.empty((total, taps, cin), dtype=dtype)
        for t, off in enumerate(offsets):
            cols[:, t] = flat[off : off + total]
        cols = cols.reshape(total, taps * cin)
        acc = cols @ wt.reshape(taps * cin, cout)
    elif cout < cin:
        # thin output: one matmul for all taps, then shifted sums
        y = (flat @ wt.transpose(1, 0, 2).reshape(cin, taps * cout)).reshape(-1, taps, cout)
        acc = y[offsets[0] : offsets[0] + total, 0].copy()
        for t, off in enumerate(offsets[1:], start=1):
            acc += y[off : off + total, t]
    else:
        acc = np.zeros((total, cout), dtype=dtype)
        for t, off in enumerate(offsets):
            acc += flat[off : off + total] @ wt[t]
    out = acc.reshape(n, hp, wp, cout)[:, :h, :w] + bias.data
    node = Tensor(np.ascontiguousarray(out), (x, weight, bias), "conv2d")

    def backward(g):
        gfull = np.zeros((total, cout), dtype=g.dtype)
        gfull.reshape(n, hp, wp, cout)[:, :h, :w] = g
        if cols is not None:
            gw = (cols.T @ gfull).reshape(weight.shape)
        else:
            gw = np.empty((taps, cin, cout), dtype=weight.data.dtype)
            for t, off in enumerate(offsets):
                gw[t] = flat[off : off + total].T @ gfull
            gw = gw.reshape(weight.shape)
        gb = g.reshape(-1, cout).sum(axis=0)
        gx = None
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            for t, off in enumerate(offsets):
                gflat[off : off + total] += gfull @ wt[t].T
            gx = gflat[:total].reshape(n, hp, wp, cin)[:, pad : pad + h, pad : pad + w]
        return gx, gw, gb

    node._backward = backward
    return node


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    node = Tensor(np.maximum(x.data, 0), (x,), "relu")
    node._backward = lambda g: (g * mask,)
    return node


def to_channels_first(x: Tensor) -> Tensor:
    node = Tensor(np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)), (x,), "nchw")
    node._backward = lambda g: (g.transpose(0, 2, 3, 1),)
    return node


def sum_all(x: Tensor) -> Tensor:
    node = Tensor(np.asarray(x.data.sum(dtype=np.float64)), (x,), "sum")
    node._backward = lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
    return node


def scale(x: Tensor, factor: float) -> Tensor:
    node = Tensor(x.data * factor, (x,), "scale")
    node._backward = lambda g: (g * factor,)
    return node


def evidential_loss(
    logits: Tensor,
    labels: np.ndarray,
    weights: LossWeights,
    schedule: AnnealSchedule,
    iteration: int,
    prior_concentration: float = 1.0,
) -> Tensor:
    """Scalar loss node; ``node.breakdown`` holds the per-term values."""
    breakdown, grad = loss_and_gradient(logits.data, labels, weights, schedule, iteration, prior_concentration)
    node = Tensor(np.asarray(breakdown.total), (logits,), "evidential_loss")
    node.breakdown = breakdown
    grad = grad.astype(logits.data.dtype)
    node._backward = lambda g: (grad * float(g),)
    return node


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 3
    hidden_channels: int = 16
    depth: int = 3
    num_classes: int = 4
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ValueError("channel counts must be positive")

    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        k = self.kernel_size
        chans = [self.in_channels] + [self.hidden_channels] * (self.depth - 1) + [self.num_classes]
        return [((k, k, cin, cout), (cout,)) for cin, cout in zip(chans[:-1], chans[1:])]


class SegNet:
    """Stack of same-padded convolutions with ReLU between them.

    Parameters are held as [w0, b0, w1, b1, ...] in declaration order.
    """

    def __init__(self, config: SegNetConfig, params: Sequence[np.ndarray] | None = None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        shapes = [s for pair in config.layer_shapes() for s in pair]
        if params is None:
            params = [np.zeros(s) for s in shapes]
        if len(params) != len(shapes):
            raise ValueError(f"expected {len(shapes)} parameter arrays, got {len(params)}")
        for p, s in zip(params, shapes):
            if tuple(p.shape) != s:
                raise ValueError(f"parameter shape {p.shape} does not match {s}")
        self.params = [Tensor(np.array(p, dtype=self.dtype), requires_grad=True) for p in params]

    @classmethod
    def initialize(cls, config: SegNetConfig, seed: int, dtype=np.float32) -> "SegNet":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = []
        for wshape, bshape in config.layer_shapes():
            fan_in = wshape[0] * wshape[1] * wshape[2]
            params.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=wshape))
            params.append(np.zeros(bshape))
        return cls(config, params, dtype)

    def astype(self, dtype) -> "SegNet":
        return SegNet(self.config, [p.data for p in self.params], dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def forward(self, images) -> Tensor:
        """images (N, Cin, H, W) in [0, 1] -> logits (N, C, H, W)."""
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise ValueError(
                f"images must be (N, {self.config.in_channels}, H, W), got shape {images.shape}"
            )
        x = Tensor(np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=self.dtype))
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            x = conv2d(x, self.params[2 * i], self.params[2 * i + 1])
            if i < n_layers - 1:
                x = relu(x)
        return to_channels_first(x)


def forward(net: SegNet, images) -> np.ndarray:
    return net.forward(images).data


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    t: int,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[list[np.ndarray], AdamState]:
    """One ADAM update with decoupled weight decay. Arrays are updated in place."""
    if t < 1:
        raise ValueError(f"step index t must be >= 1, got {t}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if weight_decay:
            p -= (lr * weight_decay) * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    state.t = t
    return list(params), state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: SegNet, path=None) -> bytes:
    """Serialize ``net``; also writes to ``path`` when given. Weights are float32."""
    cfg = net.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<5I", cfg.in_channels, cfg.hidden_channels, cfg.depth, cfg.num_classes, cfg.kernel_size))
    for p in net.params:
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(payload)
    return payload


def load_checkpoint(source) -> SegNet:
    """Load a checkpoint from a path or raw bytes."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )
    fields = struct.unpack("<5I", take(20, "config"))
    try:
        cfg = SegNetConfig(*fields)
    except ValueError as exc:
        raise CheckpointError(f"invalid network config in checkpoint: {exc}") from exc
    params = []
    for wshape, bshape in cfg.layer_shapes():
        for expected in (wshape, bshape):
            (ndim,) = struct.unpack("<I", take(4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape"))
            if tuple(shape) != expected:
                raise CheckpointError(f"tensor shape {shape} at byte {pos} does not match config {expected}")
            count = int(np.prod(shape))
            arr = np.frombuffer(take(4 * count, "tensor data"), dtype="<f4").reshape(shape)
            params.append(arr.astype(np.float32))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after byte {pos}")
    return SegNet(cfg, params, np.float32)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    total_iterations: int = 2000
    learning_rate: float = 1e-3
    weight_decay: float = FULL_SCALE_WEIGHT_DECAY
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    anneal: AnnealSchedule = field(default_factory=lambda: AnnealSchedule(1000, 1200, 0.15))
    checkpoint_every: int = 0
    lr_schedule: str = "constant"
    prior_concentration: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.total_iterations < 0:
            raise ValueError("batch_size must be >= 1 and total_iterations >= 0")
        if not (self.learning_rate > 0) or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError(f"lr_schedule must be 'constant' or 'poly', got {self.lr_schedule!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(
            batch_size=FULL_SCALE_BATCH_SIZE,
            total_iterations=FULL_SCALE_ITERATIONS,
            learning_rate=FULL_SCALE_LEARNING_RATE,
            weight_decay=FULL_SCALE_WEIGHT_DECAY,
            anneal=AnnealSchedule(*FULL_SCALE_KL_RAMP, 0.15),
        )
        base.update(overrides)
        return cls(**base)


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    if config.lr_schedule == "poly" and config.total_iterations:
        return config.learning_rate * (1.0 - iteration / config.total_iterations) ** 0.9
    return config.learning_rate


@dataclass
class TrainResult:
    net: SegNet
    log: list[tuple[int, LossBreakdown]]
    checkpoints: list[Path]


def format_log_line(iteration: int, b: LossBreakdown) -> str:
    vals = (b.total, b.wasserstein, b.dice, b.kl, b.mse, b.kl_weight_used)
    return "\t".join([str(iteration)] + [repr(float(v)) for v in vals])


def check_training_data(labels: np.ndarray, ood_masks: np.ndarray | None, num_classes: int) -> None:
    if labels.size == 0:
        raise DataContractError("training set is empty")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataContractError(
            f"training labels must lie in [0, {num_classes}); found {int(labels.max())} (reserved OOD label)"
        )
    if ood_masks is not None and np.any(ood_masks):
        raise DataContractError("training split contains OOD pixels")


def train(
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    net_config: SegNetConfig,
    out_dir=None,
    ood_masks: np.ndarray | None = None,
    log_stream=None,
) -> TrainResult:
    """Train a SegNet with ADAM on (images, labels).

    ``images`` is (M, 3, H, W) in [0, 1]; ``labels`` is (M, H, W). When
    ``out_dir`` is given, checkpoints and ``train.log`` are written there.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels).astype(np.int64)
    check_training_data(labels, ood_masks, net_config.num_classes)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels disagree on sample count")

    net = SegNet.initialize(net_config, config.seed)
    arrays = [p.data for p in net.params]
    state = AdamState.zeros_like(arrays)
    rng = np.random.default_rng(config.seed + 1)
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    log: list[tuple[int, LossBreakdown]] = []
    saved: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_file = open(out / "train.log", "w") if out is not None else None
    try:
        for it in range(config.total_iterations):
            if cursor + config.batch_size > order.size:
                order = rng.permutation(images.shape[0])
                cursor = 0
            idx = np.sort(order[cursor : cursor + config.batch_size])
            cursor += config.batch_size
            net.zero_grad()
            logits = net.forward(images[idx])
            loss = evidential_loss(
                logits, labels[idx], config.loss_weights, config.anneal, it, config.prior_concentration
            )
            loss.backward()
            adam_step(
                arrays,
                [p.grad for p in net.params],
                state,
                learning_rate_at(config, it),
                config.weight_decay,
                it + 1,
            )
            log.append((it, loss.breakdown))
            line = format_log_line(it, loss.breakdown)
            if log_file is not None:
                log_file.write(line + "\n")
            if log_stream is not None:
                log_stream(it, loss.breakdown)
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                path = out / f"checkpoint_{it + 1:07d}.edlc"
                save_checkpoint(net, path)
                saved.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        path = out / "final.edlc"
        save_checkpoint(net, path)
        saved.append(path)
    return TrainResult(net, log, saved)


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class BeliefMap:
    probabilities: np.ndarray  # (C, H, W)
    uncertainty: np.ndarray  # (H, W)


def predict(net: SegNet | bytes | str | Path, image) -> BeliefMap:
    """Per-pixel Dirichlet belief for one (3, H, W) image."""
    if not isinstance(net, SegNet):
        net = load_checkpoint(net)
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got shape {image.shape}")
    logits = net.forward(image[None]).data
    probs, unc = belief_maps(logits)
    return BeliefMap(probs[0], unc[0])
