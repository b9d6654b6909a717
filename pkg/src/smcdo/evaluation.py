"""Calibration and segmentation metrics plus the image corruption generator.

ECE binning convention: bin b covers (b/B, (b+1)/B]; any confidence <= 1/B
lands in bin 0. Accumulation uses unbuffered scatter-adds so the result is
bit-identical to a scalar two-pass loop over the same sample order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import resize_nearest
from .errors import DataError, ShapeError

DEFAULT_BINS = 15
NLL_CLAMP = 1e-12

SEVERITY = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.16, 0.20),
    "gaussian_blur": (0.5, 1.0, 1.5, 2.0, 2.5),
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.30),
    "contrast": (0.85, 0.70, 0.55, 0.40, 0.30),
    "pixelate": (1.25, 1.5, 2.0, 3.0, 4.0),
}

CORRUPTION_KINDS = tuple(SEVERITY)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in SEVERITY:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.level <= 5:
            raise ValueError(f"corruption level must be 1..5, got {self.level}")

    @property
    def severity(self) -> float:
        return SEVERITY[self.kind][self.level - 1]

    @property
    def condition_id(self) -> str:
        return f"{self.kind}:{self.level}"


@dataclass
class CalibrationBins:
    """Uniform confidence bins: counts, summed confidence, summed correctness."""

    num_bins: int
    counts: np.ndarray
    confidence_sums: np.ndarray
    correct_sums: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class CalibrationReport:
    """Metrics for one evaluation condition (clean or a corruption)."""

    condition: str
    kind: str | None
    level: int | None
    accuracy: float
    ece: float
    nll: float
    mean_entropy: float
    dice: float | None = None
    pixelwise_ece: float | None = None


def _check_probs(probs: np.ndarray, labels: np.ndarray):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ShapeError(f"probs must be (N, K), got {probs.shape}")
    if probs.shape[0] == 0:
        raise DataError("empty input: no predictions to score")
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    return probs, labels


def bin_predictions(probs: np.ndarray, labels: np.ndarray,
                    num_bins: int = DEFAULT_BINS) -> CalibrationBins:
    probs, labels = _check_probs(probs, labels)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    idx = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    counts = np.zeros(num_bins, dtype=np.int64)
    conf_sums = np.zeros(num_bins, dtype=np.float64)
    correct = np.zeros(num_bins, dtype=np.int64)
    # np.add.at is unbuffered: accumulation happens in sample order, matching
    # the scalar-loop oracle bit for bit
    np.add.at(counts, idx, 1)
    np.add.at(conf_sums, idx, conf)
    np.add.at(correct, idx, (pred == labels).astype(np.int64))
    return CalibrationBins(num_bins, counts, conf_sums, correct)


def ece_from_bins(bins: CalibrationBins) -> float:
    n = bins.total
    total = 0.0
    for b in range(bins.num_bins):
        c = int(bins.counts[b])
        if c == 0:
            continue
        acc = int(bins.correct_sums[b]) / c
        conf = float(bins.confidence_sums[b]) / c
        total += (c / n) * abs(acc - conf)
    return total


def ece(probs: np.ndarray, labels: np.ndarray, num_bins: int = DEFAULT_BINS) -> float:
    """Top-label binned expected calibration error."""
    return ece_from_bins(bin_predictions(probs, labels, num_bins))


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    probs, labels = _check_probs(probs, labels)
    return float((probs.argmax(axis=1) == labels).mean())


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean -log p[label], with p clamped at 1e-12."""
    probs, labels = _check_probs(probs, labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, NLL_CLAMP)).mean())


def dice(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|) for binary masks; both-empty counts as 1."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ShapeError(
            f"dice: mask shapes differ: {pred_mask.shape} vs {true_mask.shape}"
        )
    a = pred_mask.astype(bool)
    b = true_mask.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def pixelwise_ece(prob_maps: np.ndarray, true_masks: np.ndarray,
                  num_bins: int = DEFAULT_BINS) -> float:
    """ECE with every pixel as one sample, pooled over the dataset."""
    prob_maps = np.asarray(prob_maps, dtype=np.float64)
    true_masks = np.asarray(true_masks)
    if prob_maps.ndim != 4:
        raise ShapeError(f"prob_maps must be (N, K, H, W), got {prob_maps.shape}")
    n, k, h, w = prob_maps.shape
    if true_masks.shape != (n, h, w):
        raise ShapeError(
            f"true_masks shape {true_masks.shape} does not match prob maps "
            f"{prob_maps.shape}"
        )
    flat_probs = prob_maps.transpose(0, 2, 3, 1).reshape(-1, k)
    flat_labels = true_masks.reshape(-1)
    return ece(flat_probs, flat_labels, num_bins)


# ---------------------------------------------------------------------------
# corruptions


def _noise_rng(seed: int, spec: CorruptionSpec) -> np.random.Generator:
    kind_tag = CORRUPTION_KINDS.index(spec.kind)
    key = [np.uint64(seed), np.uint64(kind_tag * 16 + spec.level)]
    return np.random.Generator(np.random.Philox(key=key))


def _gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    h, w = images.shape[2], images.shape[3]
    out = np.zeros_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (radius, radius), (0, 0)), mode="edge")
    for i, kv in enumerate(kernel):
        out += kv * padded[:, :, i : i + h, :]
    blurred = out
    out = np.zeros_like(images)
    padded = np.pad(blurred, ((0, 0), (0, 0), (0, 0), (radius, radius)), mode="edge")
    for i, kv in enumerate(kernel):
        out += kv * padded[:, :, :, i : i + w]
    return out


def corrupt(images: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Apply one corruption at its severity level; output clipped to [0,1]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"corrupt: images must be (N, C, H, W), got {images.shape}")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("corrupt: pixel values must be in [0, 1]")
    s = spec.severity
    if spec.kind == "gaussian_noise":
        out = images + _noise_rng(seed, spec).normal(0.0, s, size=images.shape)
    elif spec.kind == "gaussian_blur":
        out = _gaussian_blur(images, s)
    elif spec.kind == "brightness":
        out = images + s
    elif spec.kind == "contrast":
        mean = images.mean(axis=(1, 2, 3), keepdims=True)
        out = (images - mean) * s + mean
    else:  # pixelate
        h, w = images.shape[2], images.shape[3]
        small_h = max(1, round(h / s))
        small_w = max(1, round(w / s))
        out = resize_nearest(resize_nearest(images, small_h, small_w), h, w)
    return np.clip(out, 0.0, 1.0)
