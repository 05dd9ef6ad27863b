"""Run configuration: one JSON document holding model, training and path settings.

Example::

    {
      "model": {"input_height": 64, "input_width": 64, "encoder_channels": [16, 32, 64, 128]},
      "epochs": 40, "batch_size": 8, "lr": 0.003, "seed": 0,
      "data_dir": null, "synthetic_n": 300
    }

Every key is optional; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_ratio: float = 0.8
    synthetic_n: int = 300
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None

    def to_dict(self) -> dict:
        out = {"model": self.model.to_dict()}
        out.update(dataclasses.asdict(self.train))
        out.update(train_ratio=self.train_ratio, synthetic_n=self.synthetic_n,
                   data_dir=self.data_dir, out_dir=self.out_dir)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        own = {"train_ratio", "synthetic_n", "data_dir", "out_dir"}
        for key in data:
            if key != "model" and key not in _TRAIN_KEYS and key not in own:
                raise ConfigError(f"unknown config key: {key!r}")
        model = data.get("model", {})
        if not isinstance(model, dict):
            raise ConfigError("config key 'model' must be an object")
        defaults = cls()
        train_kw = {k: _typed(k, data[k], getattr(defaults.train, k)) for k in _TRAIN_KEYS if k in data}
        run_kw = {k: _typed(k, data[k], getattr(defaults, k)) for k in own if k in data}
        model_defaults = ModelConfig()
        model_kw = {k: _typed(f"model.{k}", v, getattr(model_defaults, k)) if hasattr(model_defaults, k) else v
                    for k, v in model.items()}
        cfg = cls(ModelConfig.from_dict(model_kw), TrainConfig(**train_kw), **run_kw)
        if not 0.0 < cfg.train_ratio < 1.0:
            raise ConfigError(f"train_ratio must lie in (0, 1), got {cfg.train_ratio}")
        if cfg.synthetic_n < 10:
            raise ConfigError(f"synthetic_n must be >= 10, got {cfg.synthetic_n}")
        return cfg


def _typed(key: str, value, default):
    """Check ``value`` against the type of the field default."""
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string or null")
        return value
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"config key {key!r} has invalid value {value!r}")
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"config key {key!r} must be a list of integers, got {value!r}")
    return value


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(data)
