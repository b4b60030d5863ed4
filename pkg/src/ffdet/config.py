"""Run configuration: nested dataclasses loaded strictly from JSON."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import CropConfig
from .losses import FocalParams, LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 54
    max_steps: int | None = 2000
    batch_size: int = 8
    base_lr: float = 0.01
    decay_epochs: tuple[int, ...] = (36, 45)
    decay_factor: float = 0.1
    warmup_steps: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 7
    augment: bool = True

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate, momentum and weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def lr_at(self, epoch: int, step: int) -> float:
        lr = self.base_lr * self.decay_factor ** sum(epoch >= e for e in self.decay_epochs)
        if self.warmup_steps and step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        return lr


@dataclass
class DetectConfig:
    scales: tuple[int, ...] = (96, 128, 160)
    score_thresh: float = 0.05
    nms_thresh: float = 0.3
    max_per_level: int = 1000

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or min(self.scales) <= 0:
            raise ConfigError("scales must be positive integers")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    crop: CropConfig = field(default_factory=CropConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)

    def to_dict(self) -> dict:
        return to_dict(self)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        return v

    return conv(obj)


def from_dict(cls, data: dict, where: str = "config"):
    """Build dataclass ``cls`` from ``data``; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value, f"{where}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: malformed JSON at line {e.lineno}: {e.msg}") from e
    return from_dict(RunConfig, data, str(p))


def config_from_dict(data: dict) -> RunConfig:
    return from_dict(RunConfig, data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2)
