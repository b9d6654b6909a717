"""Desk-scale training: architecture builders, SGD/Adam, losses, augmentation.

Builders produce ModelGraphs for two families:

  mini_wrn    - residual stack with a widening factor, global-average-pool +
                dense + softmax head, dropout sites inserted before every conv
                whose conv index is >= first_stochastic_layer (0-based count
                of conv layers in forward order)
  mini_segnet - small encoder/decoder with per-pixel 2-class softmax; dropout
                sites live in the decoder half only

Training is bit-deterministic given (seed, config, dataset order): shuffling,
augmentation and dropout each consume an independent seed-derived stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, NumericError, ShapeError
from .graph import (
    KIND_BATCHNORM,
    KIND_CONV,
    KIND_DENSE,
    KIND_DROPOUT_SITE,
    KIND_GLOBAL_AVGPOOL,
    KIND_MAXPOOL,
    KIND_RELU,
    KIND_RESIDUAL_BEGIN,
    KIND_RESIDUAL_END,
    KIND_SOFTMAX,
    KIND_UPSAMPLE,
    LayerSpec,
    ModelGraph,
)
from .stochastic import DropoutSpec

BN_MOMENTUM = 0.1

ARCH_FAMILIES = ("mini_wrn", "mini_segnet")
OPTIMIZERS = ("sgd", "adam")
LOSSES = ("cross_entropy", "dice")


@dataclass
class ArchConfig:
    family: str
    depth_blocks: int = 2
    widening_factor: int = 1
    base_channels: int = 8
    first_stochastic_layer: int = 4
    num_classes: int = 10
    in_channels: int = 3

    def __post_init__(self):
        if self.family not in ARCH_FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}")
        if self.widening_factor < 1:
            raise ConfigError("widening_factor must be >= 1")
        if self.depth_blocks < 1:
            raise ConfigError("depth_blocks must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.first_stochastic_layer < 0:
            raise ConfigError("first_stochastic_layer must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


@dataclass
class AugmentConfig:
    pad_crop: int = 4
    horizontal_flip: bool = True

    def __post_init__(self):
        if self.pad_crop < 0:
            raise ConfigError("pad_crop must be >= 0")


@dataclass
class TrainConfig:
    epochs: int
    lr_milestones: list[tuple[int, float]]
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    rate_train: float = 0.0
    seed: int = 0
    optimizer: str = "sgd"
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr_milestones:
            raise ConfigError("lr_milestones must be nonempty")
        epochs_seen = [e for e, _ in self.lr_milestones]
        if epochs_seen[0] != 1:
            raise ConfigError("first lr milestone must be at epoch 1")
        if any(b <= a for a, b in zip(epochs_seen, epochs_seen[1:])):
            raise ConfigError("lr milestone epochs must be strictly increasing")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)


def lr_at_epoch(milestones: list[tuple[int, float]], epoch: int) -> float:
    """Piecewise-constant schedule: the rate of the last milestone <= epoch."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    current = milestones[0][1]
    for e, lr in milestones:
        if e <= epoch:
            current = lr
        else:
            break
    return current


# ---------------------------------------------------------------------------
# architecture builders


class _GraphBuilder:
    def __init__(self, first_stochastic_conv: int, init_rng: np.random.Generator):
        self.layers: list[LayerSpec] = []
        self.weights: dict[int, object] = {}
        self.conv_index = 0
        self.first_stochastic_conv = first_stochastic_conv
        self.rng = init_rng

    def add(self, spec: LayerSpec, params=None):
        if params is not None:
            self.weights[len(self.layers)] = params
        self.layers.append(spec)

    def conv(self, cin, cout, kernel=3, stride=1, padding=1, dropout_ok=True):
        if dropout_ok and self.conv_index >= self.first_stochastic_conv:
            self.add(LayerSpec(KIND_DROPOUT_SITE))
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        w = self.rng.normal(0.0, std, size=(cout, cin, kernel, kernel))
        self.add(LayerSpec(KIND_CONV), ops.ConvParams(w, np.zeros(cout), stride, padding))
        self.conv_index += 1

    def bn(self, c):
        self.add(LayerSpec(KIND_BATCHNORM),
                 ops.BatchNormParams(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)))

    def relu(self):
        self.add(LayerSpec(KIND_RELU))

    def dense(self, cin, cout):
        std = math.sqrt(2.0 / cin)
        w = self.rng.normal(0.0, std, size=(cout, cin))
        self.add(LayerSpec(KIND_DENSE), ops.DenseParams(w, np.zeros(cout)))


def build_mini_wrn(arch: ArchConfig, dropout_spec: DropoutSpec | None = None,
                   init_seed: int = 0) -> ModelGraph:
    """Residual stack in two stages with widths proportional to the widening factor."""
    if arch.family != "mini_wrn":
        raise ConfigError(f"build_mini_wrn got family {arch.family!r}")
    spec = dropout_spec or DropoutSpec("spatial", 0.0, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence(init_seed))
    b = _GraphBuilder(arch.first_stochastic_layer, rng)

    base = arch.base_channels
    wide = base * arch.widening_factor
    blocks_stage1 = (arch.depth_blocks + 1) // 2
    blocks_stage2 = arch.depth_blocks // 2

    def residual_block(c):
        b.add(LayerSpec(KIND_RESIDUAL_BEGIN))
        b.conv(c, c)
        b.bn(c)
        b.relu()
        b.conv(c, c)
        b.bn(c)
        b.add(LayerSpec(KIND_RESIDUAL_END))
        b.relu()

    # stem at base width, then widened stages
    b.conv(arch.in_channels, base)
    b.bn(base)
    b.relu()
    b.conv(base, wide)
    b.bn(wide)
    b.relu()
    for _ in range(blocks_stage1):
        residual_block(wide)
    # downsample by pooling: stride-2 3x3 convs violate the exact-geometry
    # rule on even input sizes
    b.add(LayerSpec(KIND_MAXPOOL, window=2, stride=2))
    b.conv(wide, 2 * wide)
    b.bn(2 * wide)
    b.relu()
    for _ in range(blocks_stage2):
        residual_block(2 * wide)
    b.add(LayerSpec(KIND_GLOBAL_AVGPOOL))
    b.dense(2 * wide, arch.num_classes)
    b.add(LayerSpec(KIND_SOFTMAX))

    return ModelGraph(b.layers, b.weights, spec)


def segnet_decoder_start_conv(arch: ArchConfig) -> int:
    """Conv index of the first decoder conv: 2 encoder convs + depth_blocks middle convs."""
    return 2 + arch.depth_blocks


def build_mini_segnet(arch: ArchConfig, dropout_spec: DropoutSpec | None = None,
                      init_seed: int = 0) -> ModelGraph:
    """Small encoder/decoder; dropout sites appear in the decoder only."""
    if arch.family != "mini_segnet":
        raise ConfigError(f"build_mini_segnet got family {arch.family!r}")
    if arch.num_classes != 2:
        raise ConfigError("mini_segnet is a per-pixel 2-class model")
    decoder_start = segnet_decoder_start_conv(arch)
    if arch.first_stochastic_layer < decoder_start:
        raise ConfigError(
            f"mini_segnet places dropout in the decoder: first_stochastic_layer "
            f"must be >= {decoder_start}"
        )
    spec = dropout_spec or DropoutSpec("spatial", 0.0, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence(init_seed))
    b = _GraphBuilder(arch.first_stochastic_layer, rng)

    c = arch.base_channels * arch.widening_factor
    # encoder: two pooled stages, never stochastic
    b.conv(arch.in_channels, c, dropout_ok=False)
    b.bn(c)
    b.relu()
    b.add(LayerSpec(KIND_MAXPOOL, window=2, stride=2))
    b.conv(c, 2 * c, dropout_ok=False)
    b.bn(2 * c)
    b.relu()
    b.add(LayerSpec(KIND_MAXPOOL, window=2, stride=2))
    for _ in range(arch.depth_blocks):
        b.conv(2 * c, 2 * c, dropout_ok=False)
        b.bn(2 * c)
        b.relu()
    # decoder: nearest-neighbor upsample + conv back to full resolution
    b.add(LayerSpec(KIND_UPSAMPLE, factor=2))
    b.conv(2 * c, c)
    b.bn(c)
    b.relu()
    b.add(LayerSpec(KIND_UPSAMPLE, factor=2))
    b.conv(c, c)
    b.bn(c)
    b.relu()
    b.conv(c, 2, kernel=1, padding=0)
    b.add(LayerSpec(KIND_SOFTMAX))

    return ModelGraph(b.layers, b.weights, spec)


def build_model(arch: ArchConfig, dropout_spec: DropoutSpec | None = None,
                init_seed: int = 0) -> ModelGraph:
    if arch.family == "mini_wrn":
        return build_mini_wrn(arch, dropout_spec, init_seed)
    return build_mini_segnet(arch, dropout_spec, init_seed)


def count_parameters(graph: ModelGraph, kinds=("conv", "batchnorm", "dense")) -> int:
    total = 0
    for idx, layer in enumerate(graph.layers):
        if layer.kind not in kinds:
            continue
        p = graph.weights[idx]
        if layer.kind == "conv" or layer.kind == "dense":
            total += p.weights.size + p.bias.size
        else:
            total += p.gamma.size + p.beta.size
    return total


# ---------------------------------------------------------------------------
# losses


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray, clamp: float = 1e-12):
    """Mean negative log-likelihood and its gradient w.r.t. the probabilities.

    probs is (N, K) with int labels (N,), or (N, K, H, W) with per-pixel
    labels (N, H, W).
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.ndim == 2:
        n, k = probs.shape
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match probs {probs.shape}")
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError("label out of range")
        picked = probs[np.arange(n), labels]
        clamped = np.maximum(picked, clamp)
        loss = float(-np.log(clamped).mean())
        grad = np.zeros_like(probs)
        live = picked >= clamp
        grad[np.arange(n), labels] = np.where(live, -1.0 / (n * clamped), 0.0)
        return loss, grad
    if probs.ndim == 4:
        n, k, h, w = probs.shape
        if labels.shape != (n, h, w):
            raise ShapeError(f"labels shape {labels.shape} does not match probs {probs.shape}")
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError("label out of range")
        onehot_idx = labels[:, None, :, :] == np.arange(k)[None, :, None, None]
        picked = np.where(onehot_idx, probs, 0.0).sum(axis=1)
        clamped = np.maximum(picked, clamp)
        count = n * h * w
        loss = float(-np.log(clamped).mean())
        live = (picked >= clamp)[:, None, :, :]
        grad = np.where(onehot_idx & live, -1.0 / (count * clamped[:, None, :, :]), 0.0)
        return loss, grad
    raise ShapeError(f"cross_entropy_loss: probs must be 2-D or 4-D, got {probs.ndim}-D")


def dice_loss(probs: np.ndarray, mask: np.ndarray):
    """Soft dice 1 - 2*sum(p*g)/(sum(p) + sum(g)) on the foreground channel.

    probs is (N, 2, H, W); mask is binary (N, H, W). Gradient is returned in
    the full probs shape (zero on the background channel).
    """
    probs = np.asarray(probs, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError("dice_loss expects (N, 2, H, W) probabilities")
    if mask.shape != (probs.shape[0], probs.shape[2], probs.shape[3]):
        raise ShapeError(f"mask shape {mask.shape} does not match probs {probs.shape}")
    p = probs[:, 1]
    inter = float((p * mask).sum())
    denom = float(p.sum() + mask.sum())
    if denom == 0.0:
        return 0.0, np.zeros_like(probs)
    loss = 1.0 - 2.0 * inter / denom
    grad = np.zeros_like(probs)
    grad[:, 1] = -2.0 * (mask * denom - inter) / denom**2
    return loss, grad


# ---------------------------------------------------------------------------
# augmentation


def augment(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad + random crop back to size, then horizontal flip w.p. 0.5."""
    batch = ops.check_nchw(batch, "batch")
    n, _, h, w = batch.shape
    p = config.pad_crop
    out = batch
    if p > 0:
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        out = np.empty_like(batch)
        for i in range(n):
            oy, ox = offsets[i]
            out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    if config.horizontal_flip:
        flips = rng.random(n) < 0.5
        out = out.copy() if out is batch else out
        out[flips] = out[flips, :, :, ::-1]
    return out


# ---------------------------------------------------------------------------
# optimizers


def _param_arrays(params) -> list[np.ndarray]:
    if isinstance(params, ops.ConvParams) or isinstance(params, ops.DenseParams):
        return [params.weights, params.bias]
    if isinstance(params, ops.BatchNormParams):
        return [params.gamma, params.beta]
    raise TypeError(f"unknown parameter container {type(params)!r}")


class SGD:
    """SGD with classic momentum and coupled L2 weight decay."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[tuple[int, int], np.ndarray] = {}

    def step(self, weights: dict[int, object], grads: dict[int, list[np.ndarray]],
             lr: float) -> None:
        for idx in sorted(grads):
            arrays = _param_arrays(weights[idx])
            for pos, (arr, g) in enumerate(zip(arrays, grads[idx])):
                g = g + self.weight_decay * arr
                key = (idx, pos)
                v = self.velocity.get(key)
                v = g if v is None else self.momentum * v + g
                self.velocity[key] = v
                arr -= lr * v


class Adam:
    """Adam with standard defaults; used as the second optimizer for segnet."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[tuple[int, int], np.ndarray] = {}
        self.v: dict[tuple[int, int], np.ndarray] = {}
        self.t = 0

    def step(self, weights, grads, lr):
        self.t += 1
        for idx in sorted(grads):
            arrays = _param_arrays(weights[idx])
            for pos, (arr, g) in enumerate(zip(arrays, grads[idx])):
                g = g + self.weight_decay * arr
                key = (idx, pos)
                m = self.m.get(key, np.zeros_like(arr))
                v = self.v.get(key, np.zeros_like(arr))
                m = self.beta1 * m + (1 - self.beta1) * g
                v = self.beta2 * v + (1 - self.beta2) * g * g
                self.m[key], self.v[key] = m, v
                mhat = m / (1 - self.beta1**self.t)
                vhat = v / (1 - self.beta2**self.t)
                arr -= lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training-mode forward/backward over a graph


def forward_train(graph: ModelGraph, x: np.ndarray, rate: float,
                  dropout_rng: np.random.Generator):
    """Forward with batch-stat BN and live dropout; records backward contexts."""
    ctxs: list[tuple[str, object]] = []
    stack: list[np.ndarray] = []
    for idx, layer in enumerate(graph.layers):
        kind = layer.kind
        if kind == KIND_CONV:
            x, ctx = ops.conv2d_forward(x, graph.weights[idx])
        elif kind == KIND_BATCHNORM:
            x, ctx = ops.batchnorm_train_forward(x, graph.weights[idx], BN_MOMENTUM)
        elif kind == KIND_RELU:
            x, ctx = ops.relu_forward(x)
        elif kind == KIND_MAXPOOL:
            x, ctx = ops.maxpool2d_forward(x, layer.window, layer.stride)
        elif kind == KIND_GLOBAL_AVGPOOL:
            x, ctx = ops.global_avgpool_forward(x)
        elif kind == KIND_DENSE:
            x, ctx = ops.dense_forward(x, graph.weights[idx])
        elif kind == KIND_SOFTMAX:
            x, ctx = ops.softmax_forward(x)
        elif kind == KIND_RESIDUAL_BEGIN:
            stack.append(x)
            ctx = None
        elif kind == KIND_RESIDUAL_END:
            x = ops.residual_add(stack.pop(), x)
            ctx = None
        elif kind == KIND_UPSAMPLE:
            x, ctx = ops.upsample_nearest_forward(x, layer.factor)
        elif kind == KIND_DROPOUT_SITE:
            ctx = _train_dropout_factor(graph.dropout_spec.mode, x.shape, rate, dropout_rng)
            if ctx is not None:
                x = x * ctx
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        ctxs.append((kind, ctx))
    return x, ctxs


def _train_dropout_factor(mode: str, shape, rate: float, rng: np.random.Generator):
    """Multiplicative dropout factor for one training batch, or None at rate 0."""
    if rate == 0.0:
        return None
    scale = 1.0 / (1.0 - rate)
    if mode == "spatial":
        kept = rng.random(shape[1]) >= rate
        while not kept.any():
            kept = rng.random(shape[1]) >= rate
        return np.where(kept, scale, 0.0)[None, :, None, None]
    keep = rng.random(shape) >= rate
    return keep * scale


def backward_train(graph: ModelGraph, ctxs, grad_out: np.ndarray):
    """Reverse walk; returns (grad_input, {layer index: parameter grads})."""
    grads: dict[int, list[np.ndarray]] = {}
    gstack: list[np.ndarray] = []
    g = grad_out
    for idx in range(len(graph.layers) - 1, -1, -1):
        kind, ctx = ctxs[idx]
        if kind == KIND_CONV:
            g, gw, gb = ops.conv2d_backward(ctx, g)
            grads[idx] = [gw, gb]
        elif kind == KIND_BATCHNORM:
            g, gg, gb = ops.batchnorm_train_backward(ctx, g)
            grads[idx] = [gg, gb]
        elif kind == KIND_RELU:
            g = ops.relu_backward(ctx, g)
        elif kind == KIND_MAXPOOL:
            g = ops.maxpool2d_backward(ctx, g)
        elif kind == KIND_GLOBAL_AVGPOOL:
            g = ops.global_avgpool_backward(ctx, g)
        elif kind == KIND_DENSE:
            g, gw, gb = ops.dense_backward(ctx, g)
            grads[idx] = [gw, gb]
        elif kind == KIND_SOFTMAX:
            g = ops.softmax_backward(ctx, g)
        elif kind == KIND_RESIDUAL_END:
            gstack.append(g)  # skip-path gradient waits for the begin marker
        elif kind == KIND_RESIDUAL_BEGIN:
            g = g + gstack.pop()
        elif kind == KIND_UPSAMPLE:
            g = ops.upsample_nearest_backward(ctx, g)
        elif kind == KIND_DROPOUT_SITE:
            if ctx is not None:
                g = g * ctx
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return g, grads


# ---------------------------------------------------------------------------
# the training loop


def train(graph: ModelGraph, dataset, config: TrainConfig, val_dataset=None):
    """SGD/Adam training; returns (weights, TrainHistory).

    dataset is (images, targets): int labels (N,) for classification or
    binary masks (N, H, W) for segmentation. Deterministic given the config
    seed and dataset order.
    """
    images, targets = dataset
    images = ops.check_nchw(images, "train images")
    targets = np.asarray(targets)
    n = images.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    segmentation = targets.ndim == 3
    if config.loss == "dice" and not segmentation:
        raise ConfigError("dice loss requires segmentation targets")

    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, aug_rng, drop_rng = (np.random.default_rng(c) for c in ss.spawn(3))

    if config.optimizer == "adam":
        opt = Adam(weight_decay=config.weight_decay)
    else:
        opt = SGD(config.momentum, config.weight_decay)

    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config.lr_milestones, epoch)
        order = shuffle_rng.permutation(n)
        losses = []
        hits = 0
        seen = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb = augment(images[idx], config.augmentation, aug_rng)
            yb = targets[idx]
            probs4, ctxs = forward_train(graph, xb, config.rate_train, drop_rng)
            if segmentation:
                loss, gprobs = _loss_for(config.loss)(probs4, yb)
                grad4 = gprobs
                hits += int((probs4.argmax(axis=1) == yb).sum())
                seen += yb.size
            else:
                probs2 = probs4[:, :, 0, 0]
                loss, gprobs = cross_entropy_loss(probs2, yb)
                grad4 = np.zeros_like(probs4)
                grad4[:, :, 0, 0] = gprobs
                hits += int((probs2.argmax(axis=1) == yb).sum())
                seen += len(yb)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            _, grads = backward_train(graph, ctxs, grad4)
            opt.step(graph.weights, grads, lr)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))
        history.train_accuracy.append(hits / seen)
        history.learning_rate.append(lr)
        history.val_accuracy.append(
            _eval_accuracy(graph, val_dataset, config.batch_size) if val_dataset else float("nan")
        )
    return graph.weights, history


def _loss_for(name: str):
    return dice_loss if name == "dice" else cross_entropy_loss


def _eval_accuracy(graph: ModelGraph, dataset, batch_size: int) -> float:
    from .graph import run_vanilla

    images, targets = dataset
    targets = np.asarray(targets)
    hits = 0
    seen = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start : start + batch_size]
        yb = targets[start : start + batch_size]
        probs = run_vanilla(graph, xb)
        pred = probs.argmax(axis=1)
        if targets.ndim == 3:
            hits += int((pred == yb).sum())
            seen += yb.size
        else:
            hits += int((pred[:, 0, 0] == yb).sum())
            seen += len(yb)
    return hits / seen
