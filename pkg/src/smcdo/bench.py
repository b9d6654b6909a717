"""Latency microbenchmark: warmup, timed iterations, percentile summary.

Each executor runs warmup_iters discarded iterations and timed_iters measured
ones on one fixed input, single-threaded. Alongside wall-clock, an analytic
multiply-add count per executor makes measured and analytic ratios
comparable. Reference numbers from external Cortex-A57 measurements ride
along as context metadata, never as targets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import BenchConfig
from .errors import ConfigError
from .graph import (
    KIND_CONV,
    KIND_DENSE,
    KIND_DROPOUT_SITE,
    KIND_GLOBAL_AVGPOOL,
    KIND_MAXPOOL,
    KIND_UPSAMPLE,
    ModelGraph,
    run_branched,
    run_deep_ensemble,
    run_mcdo,
    run_vanilla,
    split_at,
)
from .ops import conv_output_size
from .stochastic import MaskSeed, flop_count, sample_spatial_mask

REFERENCE_LATENCY = {
    "hardware": "NVIDIA Jetson Nano, quad-core Arm Cortex-A57 CPU",
    "note": "external reference measurements for context; not desk-scale targets",
    "latency_s": {
        "vanilla": 0.9,
        "deep_ensemble": 2.7,
        "smcdo": 2.8,
        "branched_smcdo": 1.4,
    },
}


@dataclass
class LatencyRecord:
    executor: str
    num_samples: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    overhead: float
    mac_count: int


def simulate_macs(layers, weights, base_index: int, shape, mask_for=None) -> tuple[int, tuple]:
    """Multiply-adds of one pass over the layers, tracking activation shapes.

    mask_for(layer_index, channels) may supply the channel mask a dropout
    site would apply to its following conv; None means the dense count.
    """
    n, c, h, w = (int(v) for v in shape)
    macs = 0
    pending = None
    for i, layer in enumerate(layers):
        gidx = base_index + i
        kind = layer.kind
        if kind == KIND_CONV:
            p = weights[gidx]
            macs += flop_count(p, (n, c, h, w), pending)
            pending = None
            h = conv_output_size(h, p.kernel_hw[0], p.stride, p.padding, "height")
            w = conv_output_size(w, p.kernel_hw[1], p.stride, p.padding, "width")
            c = p.out_channels
        elif kind == KIND_DROPOUT_SITE:
            pending = mask_for(gidx, c) if mask_for is not None else None
        elif kind == KIND_MAXPOOL:
            h = (h - layer.window) // layer.stride + 1
            w = (w - layer.window) // layer.stride + 1
        elif kind == KIND_GLOBAL_AVGPOOL:
            h = w = 1
        elif kind == KIND_DENSE:
            p = weights[gidx]
            macs += n * p.weights.shape[0] * p.weights.shape[1]
            c = p.weights.shape[0]
        elif kind == KIND_UPSAMPLE:
            h *= layer.factor
            w *= layer.factor
    return macs, (n, c, h, w)


def executor_macs(graph: ModelGraph, executor: str, input_shape, num_samples: int,
                  seed: int) -> int:
    """Analytic multiply-add count for one executor invocation."""
    dense_total, _ = simulate_macs(graph.layers, graph.weights, 0, input_shape)
    if executor == "vanilla":
        return dense_total
    if executor in ("deep_ensemble", "mcdo_sequential"):
        return num_samples * dense_total
    split = graph.first_stochastic_index
    if split is None:
        raise ConfigError(f"executor {executor!r} unavailable: model has no dropout sites")
    backbone, mid_shape = simulate_macs(graph.layers[:split], graph.weights, 0, input_shape)
    if executor == "mcdo_branched":
        branch, _ = simulate_macs(graph.layers[split:], graph.weights, split, mid_shape)
        return backbone + num_samples * branch
    if executor == "mcdo_branched_fused":
        total = backbone
        rate = graph.dropout_spec.rate_inf
        for i in range(num_samples):
            def mask_for(layer_index, channels, _i=i):
                return sample_spatial_mask(channels, rate, MaskSeed(seed, _i, layer_index))
            branch, _ = simulate_macs(graph.layers[split:], graph.weights, split,
                                      mid_shape, mask_for)
            total += branch
        return total
    raise ConfigError(f"unknown executor {executor!r}")


def _executor_callable(graph: ModelGraph, executor: str, x, num_samples: int, seed: int):
    if executor == "vanilla":
        return lambda: run_vanilla(graph, x)
    if executor == "deep_ensemble":
        # M handles to the same weights: latency-equivalent ensemble stand-in
        members = [graph] * num_samples
        return lambda: run_deep_ensemble(members, x)
    if executor == "mcdo_sequential":
        return lambda: run_mcdo(graph, x, num_samples, seed)
    if executor in ("mcdo_branched", "mcdo_branched_fused"):
        if graph.first_stochastic_index is None:
            raise ConfigError(
                f"executor {executor!r} unavailable: model has no dropout sites"
            )
        branched = split_at(graph, num_samples)
        fused = executor == "mcdo_branched_fused"
        return lambda: run_branched(branched, x, seed, fused=fused)
    raise ConfigError(f"unknown executor {executor!r}")


def time_callable(fn, warmup_iters: int, timed_iters: int):
    """(median, p10, p90) wall-clock milliseconds over timed_iters runs."""
    for _ in range(warmup_iters):
        fn()
    samples = np.empty(timed_iters)
    for i in range(timed_iters):
        t0 = time.perf_counter()
        fn()
        samples[i] = (time.perf_counter() - t0) * 1e3
    p10, med, p90 = np.percentile(samples, [10, 50, 90])
    return float(med), float(p10), float(p90)


def time_interleaved(fns: dict, warmup_iters: int, rounds: int) -> dict:
    """Median milliseconds per callable, sampled round-robin.

    Interleaving spreads machine drift across all callables equally, which
    makes latency *ratios* far more stable on shared hosts than timing each
    callable in its own window.
    """
    for fn in fns.values():
        for _ in range(warmup_iters):
            fn()
    samples = {name: [] for name in fns}
    for _ in range(rounds):
        for name, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            samples[name].append((time.perf_counter() - t0) * 1e3)
    return {name: float(np.median(v)) for name, v in samples.items()}


def bench_executors(graph: ModelGraph, x: np.ndarray, bench_cfg: BenchConfig,
                    seed: int) -> list[LatencyRecord]:
    """LatencyRecord per configured executor; overhead is relative to vanilla."""
    m = bench_cfg.num_samples
    vanilla_med, vanilla_p10, vanilla_p90 = time_callable(
        _executor_callable(graph, "vanilla", x, m, seed),
        bench_cfg.warmup_iters, bench_cfg.timed_iters)
    records = []
    for executor in bench_cfg.executors:
        if executor == "vanilla":
            med, p10, p90 = vanilla_med, vanilla_p10, vanilla_p90
        else:
            med, p10, p90 = time_callable(
                _executor_callable(graph, executor, x, m, seed),
                bench_cfg.warmup_iters, bench_cfg.timed_iters)
        records.append(LatencyRecord(
            executor=executor,
            num_samples=1 if executor == "vanilla" else m,
            median_ms=med,
            p10_ms=p10,
            p90_ms=p90,
            overhead=1.0 if executor == "vanilla" else med / vanilla_med,
            mac_count=executor_macs(graph, executor, x.shape, m, seed),
        ))
    return records
