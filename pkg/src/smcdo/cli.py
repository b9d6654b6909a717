"""Command-line entry point: train | eval | sweep | bench | corrupt-preview.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import REFERENCE_LATENCY, bench_executors
from .checkpoints import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, require_path
from .datasets import channel_stats, load_cifar10, load_segmentation_pairs, write_ppm
from .errors import ConfigError, DataError, NumericError, ShapeError
from .evaluation import CalibrationReport, CorruptionSpec, corrupt
from .graph import ModelGraph
from .pipeline import condition_list, evaluate_condition
from .results import emit_uncertainty_map, report_values, write_results
from .stochastic import DropoutSpec
from .trainer import build_model, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smcdo",
        description="Spatial MC-dropout CNN training, evaluation, and benchmarking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=None):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="parallel sweep cells")
        if checkpoint == "one":
            p.add_argument("--checkpoint", required=True, help="checkpoint .bin path")
        elif checkpoint == "many":
            p.add_argument("--checkpoint", action="append", required=True,
                           help="checkpoint .bin path (repeatable)")

    common(sub.add_parser("train", help="train a model and write a checkpoint"))
    common(sub.add_parser("eval", help="evaluate a checkpoint over all conditions"),
           checkpoint="one")
    common(sub.add_parser("sweep", help="grid over checkpoints x inference rates x conditions"),
           checkpoint="many")
    common(sub.add_parser("bench", help="latency microbenchmark per executor"),
           checkpoint="one")
    common(sub.add_parser("corrupt-preview", help="write corrupted sample images"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = cfg.train.seed if args.seed is None else args.seed
        if args.seed is not None:
            cfg.train = replace(cfg.train, seed=args.seed)
        out_dir = Path(args.out if args.out is not None else cfg.output_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir, seed)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out_dir, seed)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.checkpoint, out_dir, seed, args.threads)
        if args.command == "bench":
            return cmd_bench(cfg, args.checkpoint, out_dir, seed)
        return cmd_corrupt_preview(cfg, out_dir, seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except ShapeError as err:
        print(f"config error (shape): {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main())


# ---------------------------------------------------------------------------
# dataset plumbing


def _load_set(cfg: ExperimentConfig, which: str):
    """[0,1] images plus labels/masks for 'train_path' or 'test_path'."""
    path = require_path(getattr(cfg.dataset, which), which)
    if cfg.dataset.kind == "cifar10":
        return load_cifar10(path)
    return load_segmentation_pairs(path, cfg.dataset.image_size)


def _norm_stats(cfg: ExperimentConfig, images01):
    if cfg.dataset.normalization is not None:
        mean, std = cfg.dataset.normalization
        return np.asarray(mean, dtype=float), np.asarray(std, dtype=float)
    return channel_stats(images01)


def _graph_with_rate(graph: ModelGraph, meta: dict, rate_inf: float,
                     mode: str) -> ModelGraph:
    """Same weights, different inference dropout; safe for parallel cells."""
    spec = DropoutSpec(mode, meta["dropout"]["rate_train"], rate_inf)
    return ModelGraph(list(graph.layers), graph.weights, spec)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig, out_dir: Path, seed: int) -> int:
    from .datasets import normalize

    images01, targets = _load_set(cfg, "train_path")
    mean, std = _norm_stats(cfg, images01)
    images = normalize(images01, mean, std)
    graph = build_model(cfg.arch, cfg.dropout, init_seed=seed)
    _, history = train(graph, (images, targets), cfg.train)
    rate_pct = round(cfg.dropout.rate_train * 100)
    base = out_dir / "checkpoints" / f"ckpt-{cfg.config_hash()}-rt{rate_pct}-s{seed}"
    bin_path = save_checkpoint(
        graph, base, arch=cfg.arch, config_hash=cfg.config_hash(), seed=seed,
        epochs=cfg.train.epochs, dataset_kind=cfg.dataset.kind,
        normalization=(mean, std), history=history)
    print(bin_path)
    return 0


def _emit_maps(entropy, condition_id: str, maps_dir: Path, count: int) -> None:
    maps_dir.mkdir(parents=True, exist_ok=True)
    safe = condition_id.replace(":", "-")
    for i in range(min(count, entropy.shape[0])):
        emit_uncertainty_map(entropy[i], maps_dir / f"{safe}-img{i}.pgm")


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, out_dir: Path, seed: int) -> int:
    graph, meta = load_checkpoint(checkpoint)
    images01, targets = _load_set(cfg, "test_path")
    norm = meta["normalization"]
    segmentation = meta["dataset_kind"] == "segmentation"
    graph = _graph_with_rate(graph, meta, cfg.dropout.rate_inf, cfg.dropout.mode)
    reports = []
    for condition in condition_list(cfg.eval):
        report, entropy = evaluate_condition(
            graph, images01, targets, condition, eval_cfg=cfg.eval, seed=seed,
            norm_stats=(np.array(norm["mean"]), np.array(norm["std"])),
            segmentation=segmentation)
        reports.append(report)
        if segmentation and cfg.eval.maps_per_condition > 0:
            _emit_maps(entropy, report.condition, out_dir / "maps",
                       cfg.eval.maps_per_condition)
    write_results(reports, out_dir)
    print(out_dir / "results.csv")
    return 0


def _cell_descriptor(ckpt_sha: str, ckpt_name: str, rate_inf: float,
                     condition, eval_cfg, seed: int) -> dict:
    return {
        "checkpoint": ckpt_name,
        "checkpoint_sha": ckpt_sha,
        "rate_inf": rate_inf,
        "condition": "clean" if condition is None else condition.condition_id,
        "num_samples": eval_cfg.num_samples,
        "num_bins": eval_cfg.num_bins,
        "seed": seed,
    }


def _cell_id(descriptor: dict) -> str:
    canon = json.dumps(descriptor, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def cmd_sweep(cfg: ExperimentConfig, checkpoints: list[str], out_dir: Path,
              seed: int, threads: int) -> int:
    images01, targets = _load_set(cfg, "test_path")
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    loaded = {}
    for ck in checkpoints:
        graph, meta = load_checkpoint(ck)
        sha = hashlib.sha256(Path(ck).read_bytes()).hexdigest()[:12]
        loaded[ck] = (graph, meta, sha)

    conditions = condition_list(cfg.eval)
    cells = []
    for ck in checkpoints:
        _, meta, sha = loaded[ck]
        for rate in cfg.eval.rate_inf_sweep:
            for condition in conditions:
                desc = _cell_descriptor(sha, Path(ck).stem, rate, condition,
                                        cfg.eval, seed)
                cells.append((ck, rate, condition, desc, _cell_id(desc)))

    def compute(cell):
        ck, rate, condition, desc, cid = cell
        path = cells_dir / f"{cid}.json"
        if path.is_file():
            return None  # resumable: completed cells are skipped
        graph, meta, _ = loaded[ck]
        cell_graph = _graph_with_rate(graph, meta, rate, cfg.dropout.mode)
        norm = meta["normalization"]
        report, _ = evaluate_condition(
            cell_graph, images01, targets, condition, eval_cfg=cfg.eval, seed=seed,
            norm_stats=(np.array(norm["mean"]), np.array(norm["std"])),
            segmentation=meta["dataset_kind"] == "segmentation")
        values = report_values(report)
        values["condition"] = f"{desc['checkpoint']}|ri{rate:g}|{values['condition']}"
        return path, {"cell": desc, "values": values}

    pending = [c for c in cells]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(compute, pending))
    else:
        results = [compute(c) for c in pending]
    for item in results:
        if item is not None:
            path, payload = item
            path.write_text(json.dumps(payload, indent=2) + "\n")

    reports = []
    for ck, rate, condition, desc, cid in cells:
        payload = json.loads((cells_dir / f"{cid}.json").read_text())
        v = payload["values"]
        reports.append(CalibrationReport(
            condition=v["condition"], kind=v["kind"], level=v["level"],
            accuracy=v["accuracy"], ece=v["ece"], nll=v["nll"],
            mean_entropy=v["entropy"], dice=v["dice"],
            pixelwise_ece=v["pixelwise_ece"]))
    write_results(reports, out_dir)
    print(out_dir / "results.csv")
    return 0


def cmd_bench(cfg: ExperimentConfig, checkpoint: str, out_dir: Path, seed: int) -> int:
    graph, meta = load_checkpoint(checkpoint)
    graph = _graph_with_rate(graph, meta, cfg.dropout.rate_inf, cfg.dropout.mode)
    side = 32 if meta["dataset_kind"] == "cifar10" else cfg.dataset.image_size
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = rng.normal(size=(cfg.bench.batch_size, 3, side, side))
    records = bench_executors(graph, x, cfg.bench, seed)

    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ("executor", "num_samples", "median_ms", "p10_ms", "p90_ms",
               "overhead", "mac_count")
    with open(out_dir / "bench.csv", "w") as f:
        f.write(",".join(columns) + "\n")
        for r in records:
            f.write(",".join(str(getattr(r, c)) for c in columns) + "\n")
    payload = {
        "input_shape": list(x.shape),
        "warmup_iters": cfg.bench.warmup_iters,
        "timed_iters": cfg.bench.timed_iters,
        "records": [dict(zip(columns, (getattr(r, c) for c in columns)))
                    for r in records],
        "reference": REFERENCE_LATENCY,
        "masks": _bench_mask_log(graph, cfg.bench.num_samples, seed),
    }
    (out_dir / "bench.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(out_dir / "bench.csv")
    return 0


def _bench_mask_log(graph: ModelGraph, num_samples: int, seed: int) -> dict:
    """Per-(branch, dropout site) channel masks as bit-strings."""
    from .stochastic import MaskSeed, sample_spatial_mask

    if graph.dropout_spec.mode != "spatial" or graph.first_stochastic_index is None:
        return {}
    sites = set(graph.dropout_sites())
    channels_at = {idx - 1: graph.weights[idx].in_channels
                   for idx, layer in enumerate(graph.layers)
                   if layer.kind == "conv" and idx - 1 in sites}
    rate = graph.dropout_spec.rate_inf
    log = {}
    for branch in range(num_samples):
        for site, channels in channels_at.items():
            mask = sample_spatial_mask(channels, rate, MaskSeed(seed, branch, site))
            log[f"branch{branch}/layer{site}"] = mask.to_bitstring()
    return log


def cmd_corrupt_preview(cfg: ExperimentConfig, out_dir: Path, seed: int) -> int:
    images01, _ = _load_set(cfg, "test_path")
    preview_dir = out_dir / "corrupt-preview"
    preview_dir.mkdir(parents=True, exist_ok=True)
    first = images01[:1]

    def to_ppm(img01, path):
        write_ppm(path, np.rint(img01 * 255.0).astype(np.uint8))

    to_ppm(first[0], preview_dir / "clean.ppm")
    for kind in cfg.eval.corruption_kinds:
        for level in cfg.eval.corruption_levels:
            spec = CorruptionSpec(kind, level)
            out = corrupt(first, spec, seed)
            to_ppm(out[0], preview_dir / f"{kind}-l{level}.ppm")
    print(preview_dir)
    return 0
