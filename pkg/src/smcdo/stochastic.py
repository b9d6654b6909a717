"""Dropout mask sampling and the fused dropout-convolution fast path.

Spatial dropout removes whole channels; the fused path therefore only has to
convolve over the kept channels, slicing the matching kernel input slices.
Kept activations use inverted scaling 1/(1 - rate) so the expectation over
masks reproduces the clean activation at any rate.

All randomness is counter-based: a (experiment_seed, branch_index,
layer_index) triple addresses an independent Philox stream, so sequential
and branched executors sample bit-identical masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import ConvParams, check_nchw, conv2d

MAX_RATE = 0.95

_MODES = ("spatial", "element")


def _check_rate(rate: float) -> float:
    rate = float(rate)
    if not 0.0 <= rate <= MAX_RATE:
        raise ValueError(f"dropout rate must be in [0, {MAX_RATE}], got {rate}")
    return rate


@dataclass(frozen=True)
class DropoutSpec:
    """Dropout mode plus independent train-time and inference-time rates."""

    mode: str
    rate_train: float
    rate_inf: float
    scaling: str = "inverted"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"dropout mode must be one of {_MODES}, got {self.mode!r}")
        if self.scaling != "inverted":
            raise ValueError("only inverted scaling is supported")
        _check_rate(self.rate_train)
        _check_rate(self.rate_inf)


@dataclass(frozen=True)
class MaskSeed:
    """Addresses one RNG stream: (experiment seed, branch, layer)."""

    experiment_seed: int
    branch_index: int
    layer_index: int

    def __post_init__(self):
        if not 0 <= self.experiment_seed < 2**64:
            raise ValueError("experiment_seed must fit in u64")
        if not 0 <= self.branch_index < 2**31:
            raise ValueError("branch_index out of range")
        if not 0 <= self.layer_index < 2**31:
            raise ValueError("layer_index out of range")


def rng_for(seed: MaskSeed) -> np.random.Generator:
    """Philox stream keyed on the full seed triple."""
    key = [np.uint64(seed.experiment_seed),
           (np.uint64(seed.branch_index) << np.uint64(32)) | np.uint64(seed.layer_index)]
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ChannelMask:
    """Boolean keep-vector over channels plus the rate it was sampled at."""

    kept: np.ndarray
    rate: float

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=bool)
        if self.kept.ndim != 1:
            raise ShapeError("channel mask must be a 1-D boolean vector")
        if not self.kept.any():
            raise ValueError("channel mask must keep at least one channel")
        _check_rate(self.rate)

    @property
    def num_kept(self) -> int:
        return int(self.kept.sum())

    def to_bitstring(self) -> str:
        return "".join("1" if k else "0" for k in self.kept)


def sample_spatial_mask(channels: int, rate: float, seed: MaskSeed) -> ChannelMask:
    """Keep each channel independently with probability 1 - rate.

    An all-dropped draw is redrawn from the same stream until at least one
    channel survives, so downstream fused convolutions always have work.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    rate = _check_rate(rate)
    rng = rng_for(seed)
    kept = rng.random(channels) >= rate
    while not kept.any():
        kept = rng.random(channels) >= rate
    return ChannelMask(kept, rate)


def _scale(rate: float) -> float:
    return 1.0 / (1.0 - rate)


def apply_spatial_dropout(x: np.ndarray, mask: ChannelMask, rate: float) -> np.ndarray:
    """Zero dropped channels everywhere; scale kept channels by 1/(1 - rate)."""
    x = check_nchw(x)
    rate = _check_rate(rate)
    if mask.kept.shape[0] != x.shape[1]:
        raise ShapeError(
            f"channel mask length {mask.kept.shape[0]} does not match input "
            f"channel axis {x.shape[1]}"
        )
    factors = np.where(mask.kept, _scale(rate), 0.0)
    return x * factors[None, :, None, None]


def apply_element_dropout(x: np.ndarray, rate: float, seed: MaskSeed) -> np.ndarray:
    """I.i.d. per-element dropout with inverted scaling."""
    x = check_nchw(x)
    rate = _check_rate(rate)
    keep = rng_for(seed).random(x.shape) >= rate
    return x * (keep * _scale(rate))


def fused_dropout_conv(x: np.ndarray, params: ConvParams, mask: ChannelMask,
                       rate: float) -> np.ndarray:
    """Convolution computed only over the channels the mask keeps.

    Equals conv2d(apply_spatial_dropout(x, mask, rate), params) up to
    summation order (<= 1e-9 elementwise): dropped channels contribute
    exact zeros to the dense sum, so removing them changes nothing but
    the reduction order.
    """
    x = check_nchw(x)
    rate = _check_rate(rate)
    if mask.kept.shape[0] != x.shape[1]:
        raise ShapeError(
            f"channel mask length {mask.kept.shape[0]} does not match input "
            f"channel axis {x.shape[1]}"
        )
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv kernel expects {params.in_channels} input channels, got {x.shape[1]}"
        )
    kept_idx = np.flatnonzero(mask.kept)
    x_kept = x[:, kept_idx] * _scale(rate)
    reduced = ConvParams(params.weights[:, kept_idx], params.bias,
                         params.stride, params.padding)
    return conv2d(x_kept, reduced)


def flop_count(params: ConvParams, input_shape, mask: ChannelMask | None = None) -> int:
    """Multiply-add count of one convolution; a mask substitutes kept channels.

    dense count = N * O * H' * W' * I * kH * kW. Exact integer arithmetic.
    """
    n, c, h, w = (int(v) for v in input_shape)
    if c != params.in_channels:
        raise ShapeError(
            f"flop_count: input channel axis {c} does not match kernel "
            f"input channels {params.in_channels}"
        )
    kh, kw = params.kernel_hw
    span_h = h + 2 * params.padding - kh
    span_w = w + 2 * params.padding - kw
    if span_h < 0 or span_h % params.stride or span_w < 0 or span_w % params.stride:
        raise ShapeError("flop_count: invalid convolution geometry")
    ho = span_h // params.stride + 1
    wo = span_w // params.stride + 1
    in_ch = c if mask is None else mask.num_kept
    if mask is not None and mask.kept.shape[0] != c:
        raise ShapeError("flop_count: mask length does not match input channels")
    return n * params.out_channels * ho * wo * in_ch * kh * kw
