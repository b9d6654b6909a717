"""Checkpoints: binary weights plus a JSON sidecar describing the model."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .errors import DataError
from .graph import ModelGraph
from .stochastic import DropoutSpec
from .trainer import ArchConfig, build_model
from .weights_io import load_graph_weights, save_graph_weights

FORMAT = "smcdo-checkpoint-v1"


def save_checkpoint(graph: ModelGraph, base_path, *, arch: ArchConfig,
                    config_hash: str, seed: int, epochs: int, dataset_kind: str,
                    normalization, history=None) -> Path:
    """Write <base>.bin + <base>.json; returns the .bin path."""
    base_path = Path(base_path)
    base_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = base_path.with_suffix(".bin")
    save_graph_weights(graph, bin_path)
    mean, std = normalization
    meta = {
        "format": FORMAT,
        "config_hash": config_hash,
        "seed": seed,
        "epochs": epochs,
        "dataset_kind": dataset_kind,
        "arch": asdict(arch),
        "dropout": asdict(graph.dropout_spec),
        "normalization": {"mean": list(map(float, mean)), "std": list(map(float, std))},
    }
    if history is not None:
        meta["history"] = {
            "train_loss": history.train_loss,
            "train_accuracy": history.train_accuracy,
            "val_accuracy": history.val_accuracy,
            "learning_rate": history.learning_rate,
        }
    base_path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return bin_path


def load_checkpoint(path) -> tuple[ModelGraph, dict]:
    """Rebuild the graph from the sidecar and load the weights into it."""
    bin_path = Path(path)
    if not bin_path.is_file():
        raise DataError(f"checkpoint not found: {bin_path}")
    sidecar = bin_path.with_suffix(".json")
    if not sidecar.is_file():
        raise DataError(f"checkpoint sidecar not found: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as err:
        raise DataError(f"{sidecar}: invalid JSON: {err}") from err
    if meta.get("format") != FORMAT:
        raise DataError(f"{sidecar}: unknown checkpoint format {meta.get('format')!r}")
    arch = ArchConfig(**meta["arch"])
    spec = DropoutSpec(**meta["dropout"])
    graph = build_model(arch, spec, init_seed=meta.get("seed", 0))
    load_graph_weights(graph, bin_path)
    return graph, meta
