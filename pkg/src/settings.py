"""Run settings: one flat key/value namespace over the per-module config dataclasses.

A config file is a flat YAML mapping such as

    embed_dim: 50
    dropout_rate: 0.2
    learning_rate: 0.001
    min_freq: 10
    seed: 7

Every key names a field of DataConfig, ModelConfig, TrainConfig or EvalConfig.
`seed` drives both parameter initialisation and batch order, `eval_batch_size`
sizes validation and evaluation chunks, and `ablation_runs` sets how many seeds
`ablate` averages over. Command-line flags override file values.
"""
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from src.data_pipeline import DataConfig
from src.evaluation import EvalConfig
from src.exceptions import ConfigError
from src.insert_model import ModelConfig
from src.training import TrainConfig

logger = logging.getLogger(__name__)

_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
# fields that are derived or shared rather than set directly under their own name
_HIDDEN = {
    "model": {"item_vocab", "user_vocab", "seed"},
    "train": {"seed"},
    "eval": {"batch_size", "progress"},
}


def _flat_keys():
    keys = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name not in _HIDDEN.get(section, ()):
                keys.setdefault(f.name, []).append((section, f.name))
    keys["seed"] = [("model", "seed"), ("train", "seed")]
    keys["eval_batch_size"] = [("train", "eval_batch_size"), ("eval", "batch_size")]
    return keys


FLAT_KEYS = _flat_keys()


def _coerce(key, value, default):
    if value is None:
        return default
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, int):
            if float(value) != int(float(value)):
                raise ValueError(value)
            return int(float(value))
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for '{key}'") from None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation_runs: int = 1

    def apply(self, values):
        """Sets flat keys; unknown keys raise ConfigError."""
        for key, value in values.items():
            if value is None:
                continue
            if key == "ablation_runs":
                self.ablation_runs = _coerce(key, value, 1)
                continue
            if key not in FLAT_KEYS:
                raise ConfigError(f"unknown config key '{key}'")
            for section, name in FLAT_KEYS[key]:
                target = getattr(self, section)
                setattr(target, name, _coerce(key, value, getattr(target, name)))
        return self

    def validate(self):
        self.data.validate()
        self.train.validate()
        self.eval.validate()
        if self.ablation_runs < 1:
            raise ConfigError("ablation_runs must be >= 1")
        # vocabulary sizes are only known once a dataset is loaded
        ModelConfig(**{**self.model.to_dict(), "item_vocab": 2, "user_vocab": 1}).validate()
        return self

    def to_dict(self):
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "ablation_runs": self.ablation_runs,
        }


def load_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from None
    if values is None:
        return {}
    if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
        raise ConfigError(f"{path} must be a flat mapping of key: value")
    return values


def resolve_run_config(config_path=None, overrides=None):
    """Defaults, then the config file, then flag overrides."""
    run_config = RunConfig()
    if config_path is not None:
        run_config.apply(load_config_file(config_path))
        logger.debug("Loaded settings from %s", config_path)
    run_config.apply(overrides or {})
    return run_config.validate()
