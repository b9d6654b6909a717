"""Dense 4-D tensor operations (NCHW, float64) with paired backward passes.

Every activation is a numpy float64 array in batch x channel x height x width
layout. Training-capable ops come as a ``<op>_forward`` / ``<op>_backward``
pair: forward returns ``(output, ctx)`` and backward consumes the ctx. Plain
``<op>(...)`` wrappers discard the ctx for inference use.

All functions are pure with respect to their inputs (batch-norm training mode
updates running statistics through an explicit parameter object); they are
safe for concurrent read-only use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def check_nchw(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Validate and coerce a 4-D NCHW float64 tensor."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D NCHW tensor, got {x.ndim} dims")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: every dimension must be >= 1, got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    """Cross-correlation kernel (out, in, kh, kw) with bias, stride, padding."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weights.ndim != 4:
            raise ShapeError("conv weights must have shape (out, in, kh, kw)")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias must have length out_channels="
                f"{self.weights.shape[0]}, got {self.bias.shape}"
            )
        if int(self.stride) < 1:
            raise ShapeError("conv stride must be a positive integer")
        if int(self.padding) < 0:
            raise ShapeError("conv padding must be non-negative")
        self.stride = int(self.stride)
        self.padding = int(self.padding)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_hw(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class BatchNormParams:
    """Per-channel affine normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=DTYPE)
        self.beta = np.asarray(self.beta, dtype=DTYPE)
        self.running_mean = np.asarray(self.running_mean, dtype=DTYPE)
        self.running_var = np.asarray(self.running_var, dtype=DTYPE)
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ShapeError("batchnorm parameter vectors must share one channel length")
        if np.any(self.running_var < 0):
            raise ShapeError("batchnorm running_var entries must be >= 0")
        if not self.epsilon > 0:
            raise ShapeError("batchnorm epsilon must be > 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class DenseParams:
    """Fully connected layer (out_features, in_features) with bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weights.ndim != 2:
            raise ShapeError("dense weights must have shape (out, in)")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("dense bias length must equal out_features")


# ---------------------------------------------------------------------------
# convolution (im2col + matmul fast path)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    """Output extent along one spatial axis; rejects non-integral geometry."""
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d: invalid geometry on axis {axis}: size {size} + 2*padding "
            f"{padding} - kernel {kernel} must be a non-negative multiple of "
            f"stride {stride}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Patch matrix (C*kh*kw, N*H'*W'): one dgemm computes the whole batch."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding, "height")
    wo = conv_output_size(w, kw, stride, padding, "width")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(g6: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    """Scatter (N, C, kh, kw, H', W') patch gradients back onto the input."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = g6.shape[4], g6.shape[5]
    gx = np.zeros((n, c, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, i, j]
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return gx


def conv2d_forward(x: np.ndarray, params: ConvParams):
    x = check_nchw(x)
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv2d: channel axis mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {params.in_channels}"
        )
    kh, kw = params.kernel_hw
    cols, ho, wo = _im2col(x, kh, kw, params.stride, params.padding)
    n, o = x.shape[0], params.out_channels
    w2 = params.weights.reshape(o, -1)
    out2 = w2 @ cols
    out2 += params.bias[:, None]
    out = np.ascontiguousarray(out2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    ctx = (cols, x.shape, params)
    return out, ctx


def conv2d_backward(ctx, grad_out: np.ndarray):
    cols, x_shape, params = ctx
    n, o = grad_out.shape[0], params.out_channels
    kh, kw = params.kernel_hw
    c = params.in_channels
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    g2 = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(o, -1)
    gw = (g2 @ cols.T).reshape(params.weights.shape)
    gb = grad_out.sum(axis=(0, 2, 3))
    w2 = params.weights.reshape(o, -1)
    gcols = w2.T @ g2
    g6 = gcols.reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    gx = _col2im(g6, x_shape, kh, kw, params.stride, params.padding)
    return gx, gw, gb


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Standard zero-padded cross-correlation; output (N, O, H', W')."""
    return conv2d_forward(x, params)[0]


# ---------------------------------------------------------------------------
# batch normalization


def _check_bn_channels(x: np.ndarray, params: BatchNormParams):
    if x.shape[1] != params.channels:
        raise ShapeError(
            f"batchnorm: channel axis mismatch: input has {x.shape[1]} channels, "
            f"parameters have {params.channels}"
        )


def batchnorm_inference_forward(x: np.ndarray, params: BatchNormParams):
    x = check_nchw(x)
    _check_bn_channels(x, params)
    inv = 1.0 / np.sqrt(params.running_var + params.epsilon)
    xhat = (x - params.running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    return out, (xhat, inv, params)


def batchnorm_inference_backward(ctx, grad_out: np.ndarray):
    xhat, inv, params = ctx
    scale = (params.gamma * inv)[None, :, None, None]
    gx = grad_out * scale
    ggamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gbeta = grad_out.sum(axis=(0, 2, 3))
    return gx, ggamma, gbeta


def batchnorm_inference(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """Per-channel (x - mean)/sqrt(var + eps) * gamma + beta using running stats."""
    return batchnorm_inference_forward(x, params)[0]


def batchnorm_train_forward(x: np.ndarray, params: BatchNormParams, momentum: float = 0.1):
    """Normalize with batch statistics and update running stats in place."""
    x = check_nchw(x)
    _check_bn_channels(x, params)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * params.gamma[None, :, None, None]
    out += params.beta[None, :, None, None]
    params.running_mean *= 1.0 - momentum
    params.running_mean += momentum * mu
    params.running_var *= 1.0 - momentum
    params.running_var += momentum * var
    return out, (xhat, inv, params)


def batchnorm_train_backward(ctx, grad_out: np.ndarray):
    # compact form: gx = gamma*inv/m * (m*gy - sum(gy) - xhat*sum(gy*xhat))
    xhat, inv, params = ctx
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    gbeta = grad_out.sum(axis=(0, 2, 3))
    ggamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gx = m * grad_out
    gx -= gbeta[None, :, None, None]
    gx -= xhat * ggamma[None, :, None, None]
    gx *= (params.gamma * inv / m)[None, :, None, None]
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# activations, pooling, dense, softmax, residual, upsample


def relu_forward(x: np.ndarray):
    x = np.asarray(x, dtype=DTYPE)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(ctx, grad_out: np.ndarray):
    return grad_out * ctx


def relu(x: np.ndarray) -> np.ndarray:
    return relu_forward(x)[0]


def maxpool2d_forward(x: np.ndarray, window: int, stride: int):
    x = check_nchw(x)
    n, c, h, w = x.shape
    span_h, span_w = h - window, w - window
    if span_h < 0 or span_h % stride != 0:
        raise ShapeError(
            f"maxpool2d: height {h} incompatible with window {window} stride {stride}"
        )
    if span_w < 0 or span_w % stride != 0:
        raise ShapeError(
            f"maxpool2d: width {w} incompatible with window {window} stride {stride}"
        )
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    # np.argmax keeps the first maximum in scan order: the tie-break contract.
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, window, stride, idx)


def maxpool2d_backward(ctx, grad_out: np.ndarray):
    x_shape, window, stride, idx = ctx
    n, c, h, w = x_shape
    ho, wo = idx.shape[2], idx.shape[3]
    gx = np.zeros(x_shape, dtype=DTYPE)
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oy[None, None] * stride + idx // window
    cols = ox[None, None] * stride + idx % window
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gx, (nn, cc, rows, cols), grad_out)
    return gx


def maxpool2d(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Max pooling; ties resolve to the first element in scan order."""
    return maxpool2d_forward(x, window, stride)[0]


def global_avgpool_forward(x: np.ndarray):
    x = check_nchw(x)
    out = x.mean(axis=(2, 3), keepdims=True)
    return out, x.shape


def global_avgpool_backward(ctx, grad_out: np.ndarray):
    n, c, h, w = ctx
    return np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy()


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return global_avgpool_forward(x)[0]


def dense_forward(x: np.ndarray, params: DenseParams):
    x = check_nchw(x)
    if x.shape[2] != 1 or x.shape[3] != 1:
        raise ShapeError(
            f"dense: spatial axes must be 1x1 (got {x.shape[2]}x{x.shape[3]}); "
            "pool before the dense head"
        )
    if x.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"dense: channel axis mismatch: input has {x.shape[1]} features, "
            f"weights expect {params.weights.shape[1]}"
        )
    x2 = x[:, :, 0, 0]
    out = x2 @ params.weights.T + params.bias
    return out[:, :, None, None], (x2, params)


def dense_backward(ctx, grad_out: np.ndarray):
    x2, params = ctx
    g2 = grad_out[:, :, 0, 0]
    gw = g2.T @ x2
    gb = g2.sum(axis=0)
    gx = (g2 @ params.weights)[:, :, None, None]
    return gx, gw, gb


def dense(x: np.ndarray, params: DenseParams) -> np.ndarray:
    return dense_forward(x, params)[0]


def softmax_forward(x: np.ndarray):
    x = check_nchw(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out, out


def softmax_backward(ctx, grad_out: np.ndarray):
    p = ctx
    dot = (grad_out * p).sum(axis=1, keepdims=True)
    return p * (grad_out - dot)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis, per batch element and spatial position."""
    return softmax_forward(x)[0]


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = check_nchw(a, "residual lhs")
    b = check_nchw(b, "residual rhs")
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def upsample_nearest_forward(x: np.ndarray, factor: int):
    x = check_nchw(x)
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    out = np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)
    return out, (x.shape, factor)


def upsample_nearest_backward(ctx, grad_out: np.ndarray):
    (n, c, h, w), f = ctx
    return grad_out.reshape(n, c, h, f, w, f).sum(axis=(3, 5))


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return upsample_nearest_forward(x, factor)[0]
