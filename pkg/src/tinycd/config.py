"""Run configuration: one JSON document with nested sections, strictly validated.

Unknown keys anywhere are rejected so typos fail fast instead of silently
training with defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentationConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .ops import LOSSES
from .optim import ScheduleConfig

PRECISIONS = ("f32", "f64")


@dataclass
class OptimizerConfig:
    lr: float = 3e-3
    weight_decay: float = 9e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError(
                f"lr and weight_decay must be >= 0, got {self.lr}/{self.weight_decay}"
            )


def _from_mapping(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {path!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config key {path}.{unknown[0]}")
    try:
        return cls(**data)
    except ConfigurationError as exc:
        raise ConfigurationError(f"in section {path!r}: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig | None = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss: str = "bce"
    data_root: str = "data"
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    precision: str = "f32"
    deterministic: bool = False

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.schedule is None:
            self.schedule = ScheduleConfig(
                lr_max=self.optimizer.lr, lr_min=0.0, total_epochs=max(1, self.epochs)
            )

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config key {unknown[0]}")
        kwargs = dict(data)
        if "model" in kwargs:
            kwargs["model"] = _from_mapping(ModelConfig, kwargs["model"], "model")
        if "optimizer" in kwargs:
            kwargs["optimizer"] = _from_mapping(OptimizerConfig, kwargs["optimizer"], "optimizer")
        aug = dict(kwargs.get("augmentation") or {})
        if "seed" not in aug:
            aug["seed"] = int(data.get("seed", 0))
        kwargs["augmentation"] = _from_mapping(AugmentationConfig, aug, "augmentation")
        if "schedule" in kwargs and kwargs["schedule"] is not None:
            sched = dict(kwargs["schedule"])
            sched.setdefault("lr_max", kwargs.get("optimizer", OptimizerConfig()).lr)
            sched.setdefault("total_epochs", max(1, int(data.get("epochs", 100))))
            kwargs["schedule"] = _from_mapping(ScheduleConfig, sched, "schedule")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
