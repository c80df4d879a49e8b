"""Run configuration: one YAML document, overridable from the command line."""

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .training import StageConfig, default_stages

DEFAULTS = {
    "seed": 0,
    "model": {
        "encoder": {"image_size": 64, "patch_size": 16, "channels": 3, "embed_dim": 64,
                    "num_heads": 4, "num_blocks": 4, "mlp_ratio": 4},
        "text": {"vocab_size": 64, "max_len": 16, "embed_dim": 64, "num_heads": 4,
                 "num_blocks": 2, "mlp_ratio": 4, "pooling": "eos"},
        "fusion": "c2ga",
        "aggregate_normalize": False,
    },
    "data": {"train_n": 2000, "test_n": 500, "camo_min": 0.6, "camo_max": 1.0, "seed": 0},
    "mask": "gt",
    "train": {
        "batch_size": 32,
        "normalize": True,
        "stage1": {"epochs": 10, "lr": 1.0e-3},
        "stage2": {"epochs": 30, "lr": 5.0e-4},
    },
    "eval": {"ks": [1, 5, 10]},
    "gradcheck": {
        "encoder": {"image_size": 16, "patch_size": 8, "channels": 3, "embed_dim": 16,
                    "num_heads": 2, "num_blocks": 2, "mlp_ratio": 2},
        "text": {"vocab_size": 64, "max_len": 16, "embed_dim": 16, "num_heads": 2,
                 "num_blocks": 1, "mlp_ratio": 2, "pooling": "eos"},
        "batch": 2,
        "eps": 3.0e-5,
        "jitter": 0.1,
        "seed": 0,
    },
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=()):
        """Defaults, then the YAML file, then ``key.path=value`` overrides."""
        raw = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                doc = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            raw = _merge(raw, doc)
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            node = {}
            cur = node
            parts = key.split(".")
            for p in parts[:-1]:
                cur = cur.setdefault(p, {})
            cur[parts[-1]] = yaml.safe_load(value)
            raw = _merge(raw, node)
        cfg = cls(raw)
        cfg.model_config()
        cfg.stages()
        return cfg

    def __getitem__(self, key):
        return self.raw[key]

    def model_config(self, fusion=None):
        m = dict(self.raw["model"])
        if fusion is not None:
            m["fusion"] = fusion
        try:
            return ModelConfig(**m)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def stages(self):
        t = self.raw["train"]
        try:
            return [StageConfig(1, ("fusion",), float(t["stage1"]["lr"]), int(t["stage1"]["epochs"]),
                                int(t["batch_size"])),
                    StageConfig(2, default_stages()[1].groups, float(t["stage2"]["lr"]),
                                int(t["stage2"]["epochs"]), int(t["batch_size"]))]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid train section: {e}") from e

    def echo(self):
        """Canonical JSON text of the full configuration."""
        return json.dumps(self.raw, sort_keys=True)


def example_config_text():
    return resources.files("camoret").joinpath("default_config.yaml").read_text()
