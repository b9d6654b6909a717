"""Strict config parsing: unknown keys fail closed, values validated."""

import json

import pytest

from smcdo.config import load_config, parse_config
from smcdo.errors import ConfigError


def valid_doc(**overrides):
    doc = {
        "arch": {"family": "mini_wrn", "depth_blocks": 2, "widening_factor": 2,
                 "base_channels": 8, "first_stochastic_layer": 4, "num_classes": 10},
        "dropout": {"mode": "spatial", "rate_train": 0.1, "rate_inf": 0.3},
        "train": {"epochs": 2, "lr_milestones": [[1, 0.1]], "batch_size": 16},
        "eval": {"num_samples": 3, "rate_inf_sweep": [0.1, 0.3]},
        "bench": {"warmup_iters": 1, "timed_iters": 10},
        "dataset": {"kind": "cifar10", "train_path": "train.bin", "test_path": "test.bin"},
        "seed": 5,
        "output_dir": "out",
    }
    doc.update(overrides)
    return doc


class TestParseConfig:
    def test_valid_document(self):
        cfg = parse_config(valid_doc())
        assert cfg.arch.widening_factor == 2
        assert cfg.dropout.rate_inf == 0.3
        assert cfg.train.seed == 5
        assert cfg.train.rate_train == 0.1
        assert cfg.eval.rate_inf_sweep == [0.1, 0.3]

    def test_unknown_root_key_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(valid_doc(bogus=1))

    def test_unknown_nested_key_rejected(self):
        doc = valid_doc()
        doc["train"]["turbo"] = True
        with pytest.raises(ConfigError, match="turbo"):
            parse_config(doc)

    def test_missing_required_section(self):
        doc = valid_doc()
        del doc["arch"]
        with pytest.raises(ConfigError, match="arch"):
            parse_config(doc)

    def test_empty_sweep_rejected(self):
        doc = valid_doc()
        doc["eval"]["rate_inf_sweep"] = []
        with pytest.raises(ConfigError, match="rate_inf_sweep"):
            parse_config(doc)

    def test_unknown_executor_rejected(self):
        doc = valid_doc()
        doc["bench"]["executors"] = ["vanilla", "warp_drive"]
        with pytest.raises(ConfigError, match="warp_drive"):
            parse_config(doc)

    def test_timed_iters_floor(self):
        doc = valid_doc()
        doc["bench"]["timed_iters"] = 9
        with pytest.raises(ConfigError, match="timed_iters"):
            parse_config(doc)

    def test_bad_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config(valid_doc(seed=-1))

    def test_bad_dropout_rate_surfaces_as_config_error(self):
        doc = valid_doc()
        doc["dropout"]["rate_inf"] = 0.99
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_normalization_parsing(self):
        doc = valid_doc()
        doc["dataset"]["normalization"] = {"mean": [0.5, 0.5, 0.5], "std": [0.2, 0.2, 0.2]}
        cfg = parse_config(doc)
        assert cfg.dataset.normalization == ([0.5, 0.5, 0.5], [0.2, 0.2, 0.2])

    def test_normalization_wrong_length(self):
        doc = valid_doc()
        doc["dataset"]["normalization"] = {"mean": [0.5], "std": [0.2, 0.2, 0.2]}
        with pytest.raises(ConfigError, match="3 entries"):
            parse_config(doc)

    def test_config_hash_stable_and_sensitive(self):
        a = parse_config(valid_doc())
        b = parse_config(valid_doc())
        c = parse_config(valid_doc(seed=6))
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()


class TestLoadConfig:
    def test_round_trip_from_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(valid_doc()))
        cfg = load_config(p)
        assert cfg.dataset.kind == "cifar10"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(p)
