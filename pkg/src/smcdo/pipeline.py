"""Evaluation orchestration: corruption conditions to calibration reports.

Corruption and dropout sampling happen in pixel space [0,1]; normalization is
applied just before the model. MCDO mask seeds advance per batch (seed +
batch index) so the test set is scored under diverse subnetworks while any
single batch stays bit-reproducible.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import EvalConfig
from .datasets import normalize
from .evaluation import (
    CalibrationReport,
    CorruptionSpec,
    accuracy,
    corrupt,
    dice,
    ece,
    nll,
    pixelwise_ece,
)
from .graph import ModelGraph, aggregate, run_mcdo, run_vanilla


def condition_list(eval_cfg: EvalConfig) -> list[CorruptionSpec | None]:
    """Clean first, then every configured corruption kind x level."""
    conditions: list[CorruptionSpec | None] = [None]
    for kind in eval_cfg.corruption_kinds:
        for level in eval_cfg.corruption_levels:
            conditions.append(CorruptionSpec(kind, level))
    return conditions


def predict_dataset(graph: ModelGraph, images: np.ndarray, *, num_samples: int,
                    seed: int, batch_size: int = 256, vanilla: bool = False,
                    fused: bool = False):
    """Mean probabilities and per-example (or per-pixel) predictive entropy."""
    probs_parts = []
    entropy_parts = []
    for bidx, start in enumerate(range(0, images.shape[0], batch_size)):
        xb = images[start : start + batch_size]
        if vanilla:
            probs = run_vanilla(graph, xb)
            mean, entropy, _ = aggregate([probs])
        else:
            ens = run_mcdo(graph, xb, num_samples, seed=(seed + bidx) % 2**64,
                           fused=fused)
            mean, entropy = ens.mean_probs, ens.predictive_entropy
        probs_parts.append(mean)
        entropy_parts.append(entropy)
    return np.concatenate(probs_parts), np.concatenate(entropy_parts)


def evaluate_condition(graph: ModelGraph, images01: np.ndarray, targets: np.ndarray,
                       condition: CorruptionSpec | None, *, eval_cfg: EvalConfig,
                       seed: int, norm_stats, segmentation: bool,
                       vanilla: bool = False, fused: bool = False):
    """One CalibrationReport (plus entropy maps for segmentation models)."""
    if condition is None:
        shown = images01
        cond_id, kind, level = "clean", None, None
    else:
        shown = corrupt(images01, condition, seed)
        cond_id, kind, level = condition.condition_id, condition.kind, condition.level
    mean, std = norm_stats
    x = normalize(shown, mean, std)
    probs, entropy = predict_dataset(
        graph, x, num_samples=eval_cfg.num_samples, seed=seed,
        batch_size=eval_cfg.batch_size, vanilla=vanilla, fused=fused)

    if segmentation:
        masks = targets
        pred_masks = probs.argmax(axis=1)
        dices = [dice(pred_masks[i], masks[i]) for i in range(masks.shape[0])]
        flat = probs.transpose(0, 2, 3, 1).reshape(-1, probs.shape[1])
        flat_labels = masks.reshape(-1)
        report = CalibrationReport(
            condition=cond_id, kind=kind, level=level,
            accuracy=accuracy(flat, flat_labels),
            ece=ece(flat, flat_labels, eval_cfg.num_bins),
            nll=nll(flat, flat_labels),
            mean_entropy=float(entropy.mean()),
            dice=float(np.mean(dices)),
            pixelwise_ece=pixelwise_ece(probs, masks, eval_cfg.num_bins),
        )
        return report, entropy
    probs2 = probs[:, :, 0, 0]
    report = CalibrationReport(
        condition=cond_id, kind=kind, level=level,
        accuracy=accuracy(probs2, targets),
        ece=ece(probs2, targets, eval_cfg.num_bins),
        nll=nll(probs2, targets),
        mean_entropy=float(entropy.mean()),
    )
    return report, entropy


def evaluate_conditions(graph: ModelGraph, images01: np.ndarray, targets: np.ndarray,
                        *, eval_cfg: EvalConfig, seed: int, norm_stats,
                        segmentation: bool, rate_inf: float | None = None,
                        vanilla: bool = False):
    """Reports for every condition; optionally overrides the inference rate."""
    if rate_inf is not None:
        graph.dropout_spec = replace(graph.dropout_spec, rate_inf=rate_inf)
    out = []
    for condition in condition_list(eval_cfg):
        report, entropy = evaluate_condition(
            graph, images01, targets, condition, eval_cfg=eval_cfg, seed=seed,
            norm_stats=norm_stats, segmentation=segmentation, vanilla=vanilla)
        out.append((report, entropy))
    return out
