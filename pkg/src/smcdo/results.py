"""Result emission: results.csv + results.jsonl (matched values), PGM maps."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .datasets import write_pgm
from .evaluation import CalibrationReport

CSV_COLUMNS = (
    "condition",
    "kind",
    "level",
    "accuracy",
    "ece",
    "nll",
    "entropy",
    "dice",
    "pixelwise_ece",
)


def report_values(report: CalibrationReport) -> dict:
    return {
        "condition": report.condition,
        "kind": report.kind,
        "level": report.level,
        "accuracy": report.accuracy,
        "ece": report.ece,
        "nll": report.nll,
        "entropy": report.mean_entropy,
        "dice": report.dice,
        "pixelwise_ece": report.pixelwise_ece,
    }


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_line(values: dict) -> str:
    return ",".join(_cell(values[c]) for c in CSV_COLUMNS)


def write_results(reports: list[CalibrationReport], out_dir) -> tuple[Path, Path]:
    """Dual emission: every CSV row has a JSONL object with identical values."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    jsonl_path = out_dir / "results.jsonl"
    rows = [report_values(r) for r in reports]
    with open(csv_path, "w") as f:
        f.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            f.write(csv_line(row) + "\n")
    with open(jsonl_path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=False) + "\n")
    return csv_path, jsonl_path


ENTROPY_FULL_SCALE = math.log(2.0)  # two-class predictive entropy ceiling


def emit_uncertainty_map(entropy_map: np.ndarray, path) -> None:
    """Linear [0, ln 2] -> [0, 255] scaling, round half up, binary PGM."""
    entropy_map = np.asarray(entropy_map, dtype=np.float64)
    if not np.all(np.isfinite(entropy_map)):
        raise ValueError("entropy map contains non-finite values")
    scaled = entropy_map * (255.0 / ENTROPY_FULL_SCALE)
    bytes_ = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    write_pgm(path, bytes_)
