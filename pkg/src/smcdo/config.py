"""Experiment configuration: one JSON document, parsed fail-closed.

Unknown keys anywhere in the tree are a validation error. Paths referenced
by a command are checked for existence when that command validates them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evaluation import CORRUPTION_KINDS, DEFAULT_BINS
from .stochastic import DropoutSpec
from .trainer import ArchConfig, AugmentConfig, TrainConfig

BENCH_EXECUTORS = (
    "vanilla",
    "deep_ensemble",
    "mcdo_sequential",
    "mcdo_branched",
    "mcdo_branched_fused",
)

DATASET_KINDS = ("cifar10", "segmentation")


@dataclass
class EvalConfig:
    num_samples: int = 3
    rate_inf_sweep: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.3])
    corruption_kinds: list[str] = field(default_factory=lambda: list(CORRUPTION_KINDS))
    corruption_levels: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    num_bins: int = DEFAULT_BINS
    batch_size: int = 256
    maps_per_condition: int = 2

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("eval.num_samples must be >= 1")
        if not self.rate_inf_sweep:
            raise ConfigError("eval.rate_inf_sweep must be nonempty")
        for k in self.corruption_kinds:
            if k not in CORRUPTION_KINDS:
                raise ConfigError(f"eval.corruption_kinds: unknown kind {k!r}")
        for lv in self.corruption_levels:
            if not 1 <= lv <= 5:
                raise ConfigError("eval.corruption_levels entries must be 1..5")
        if self.num_bins < 1:
            raise ConfigError("eval.num_bins must be >= 1")


@dataclass
class BenchConfig:
    warmup_iters: int = 3
    timed_iters: int = 15
    executors: list[str] = field(default_factory=lambda: list(BENCH_EXECUTORS))
    batch_size: int = 1
    num_samples: int = 3

    def __post_init__(self):
        if self.warmup_iters < 0:
            raise ConfigError("bench.warmup_iters must be >= 0")
        if self.timed_iters < 10:
            raise ConfigError("bench.timed_iters must be >= 10")
        if not self.executors:
            raise ConfigError("bench.executors must be nonempty")
        for e in self.executors:
            if e not in BENCH_EXECUTORS:
                raise ConfigError(f"bench.executors: unknown executor {e!r}")
        if self.num_samples < 1:
            raise ConfigError("bench.num_samples must be >= 1")


@dataclass
class DatasetConfig:
    kind: str
    train_path: str | None = None
    test_path: str | None = None
    image_size: int = 64
    normalization: tuple[list[float], list[float]] | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.image_size < 4:
            raise ConfigError("dataset.image_size must be >= 4")


@dataclass
class ExperimentConfig:
    arch: ArchConfig
    dropout: DropoutSpec
    train: TrainConfig
    eval: EvalConfig
    bench: BenchConfig
    dataset: DatasetConfig
    output_dir: str = "out"
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


class _Section:
    """Dict wrapper that tracks consumed keys and fails on leftovers."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected an object")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def get(self, key, default=None, required=False):
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ConfigError(f"{self.path}.{key}: missing required key")
            return default
        return self.data[key]

    def sub(self, key, required=False) -> "_Section | None":
        val = self.get(key, required=required)
        if val is None:
            return None
        return _Section(val, f"{self.path}.{key}")

    def finish(self):
        unknown = set(self.data) - self.seen
        if unknown:
            raise ConfigError(f"{self.path}: unknown keys {sorted(unknown)}")


def _wrap(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


def parse_config(doc: dict) -> ExperimentConfig:
    root = _Section(doc, "config")

    arch_s = root.sub("arch", required=True)
    arch = _wrap("config.arch", ArchConfig,
                 family=arch_s.get("family", required=True),
                 depth_blocks=arch_s.get("depth_blocks", 2),
                 widening_factor=arch_s.get("widening_factor", 1),
                 base_channels=arch_s.get("base_channels", 8),
                 first_stochastic_layer=arch_s.get("first_stochastic_layer", 4),
                 num_classes=arch_s.get("num_classes", 10))
    arch_s.finish()

    drop_s = root.sub("dropout", required=True)
    dropout = _wrap("config.dropout", DropoutSpec,
                    mode=drop_s.get("mode", "spatial"),
                    rate_train=drop_s.get("rate_train", 0.0),
                    rate_inf=drop_s.get("rate_inf", 0.0))
    drop_s.finish()

    seed = root.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("config.seed: must be an unsigned 64-bit integer")

    train_s = root.sub("train", required=True)
    aug_s = train_s.sub("augmentation")
    if aug_s is None:
        augmentation = AugmentConfig()
    else:
        augmentation = _wrap("config.train.augmentation", AugmentConfig,
                             pad_crop=aug_s.get("pad_crop", 4),
                             horizontal_flip=aug_s.get("horizontal_flip", True))
        aug_s.finish()
    milestones_raw = train_s.get("lr_milestones", required=True)
    try:
        milestones = [(int(e), float(lr)) for e, lr in milestones_raw]
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config.train.lr_milestones: {err}") from err
    train = _wrap("config.train", TrainConfig,
                  epochs=train_s.get("epochs", required=True),
                  lr_milestones=milestones,
                  momentum=train_s.get("momentum", 0.9),
                  weight_decay=train_s.get("weight_decay", 5e-4),
                  batch_size=train_s.get("batch_size", 128),
                  augmentation=augmentation,
                  rate_train=dropout.rate_train,
                  seed=seed,
                  optimizer=train_s.get("optimizer", "sgd"),
                  loss=train_s.get("loss", "cross_entropy"))
    train_s.finish()

    eval_s = root.sub("eval")
    if eval_s is None:
        eval_cfg = EvalConfig()
    else:
        eval_cfg = _wrap("config.eval", EvalConfig,
                         num_samples=eval_s.get("num_samples", 3),
                         rate_inf_sweep=eval_s.get("rate_inf_sweep", [0.0, 0.1, 0.3]),
                         corruption_kinds=eval_s.get("corruption_kinds",
                                                     list(CORRUPTION_KINDS)),
                         corruption_levels=eval_s.get("corruption_levels",
                                                      [1, 2, 3, 4, 5]),
                         num_bins=eval_s.get("num_bins", DEFAULT_BINS),
                         batch_size=eval_s.get("batch_size", 256),
                         maps_per_condition=eval_s.get("maps_per_condition", 2))
        eval_s.finish()

    bench_s = root.sub("bench")
    if bench_s is None:
        bench = BenchConfig()
    else:
        bench = _wrap("config.bench", BenchConfig,
                      warmup_iters=bench_s.get("warmup_iters", 3),
                      timed_iters=bench_s.get("timed_iters", 15),
                      executors=bench_s.get("executors", list(BENCH_EXECUTORS)),
                      batch_size=bench_s.get("batch_size", 1),
                      num_samples=bench_s.get("num_samples", 3))
        bench_s.finish()

    data_s = root.sub("dataset", required=True)
    norm = data_s.get("normalization")
    if norm is not None:
        norm_s = _Section(norm, "config.dataset.normalization")
        mean = norm_s.get("mean", required=True)
        std = norm_s.get("std", required=True)
        norm_s.finish()
        if len(mean) != 3 or len(std) != 3:
            raise ConfigError("config.dataset.normalization: mean/std must have 3 entries")
        if any(s <= 0 for s in std):
            raise ConfigError("config.dataset.normalization: std entries must be > 0")
        norm = ([float(v) for v in mean], [float(v) for v in std])
    dataset = _wrap("config.dataset", DatasetConfig,
                    kind=data_s.get("kind", required=True),
                    train_path=data_s.get("train_path"),
                    test_path=data_s.get("test_path"),
                    image_size=data_s.get("image_size", 64),
                    normalization=norm)
    data_s.finish()

    output_dir = root.get("output_dir", "out")
    root.finish()

    return ExperimentConfig(arch=arch, dropout=dropout, train=train, eval=eval_cfg,
                            bench=bench, dataset=dataset, output_dir=output_dir,
                            raw=doc)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    return parse_config(doc)


def require_path(value: str | None, what: str) -> Path:
    if value is None:
        raise ConfigError(f"config.dataset.{what} is required for this command")
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"config.dataset.{what}: path does not exist: {p}")
    return p
