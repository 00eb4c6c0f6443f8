"""Run configuration: one JSON document covering model, loss, training,
inference and data locations.

Every section is optional and falls back to the library defaults.  Unknown
keys at any level are rejected so a typo cannot silently become a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthSpec
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class InferenceOptions:
    mode: str = "streaming"
    window: int = 20
    stride: int = 20
    theta: float = 0.0
    nms_radius: int | None = None

    def __post_init__(self):
        if self.mode not in ("streaming", "sliding"):
            raise ValueError(f"mode must be 'streaming' or 'sliding', got {self.mode!r}")
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must be in [0, 1]")
        if self.nms_radius is not None and self.nms_radius < 0:
            raise ValueError("nms_radius must be >= 0")


@dataclass
class DataPaths:
    data_dir: str | None = None
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"


# keys of TrainConfig that live in their own sections
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("model", "loss")]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: dict = field(default_factory=dict)
    inference: InferenceOptions = field(default_factory=InferenceOptions)
    data: DataPaths = field(default_factory=DataPaths)
    synth: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return TrainConfig(model=self.model, loss=self.loss, **self.train)

    def synth_spec(self, **overrides) -> SynthSpec:
        return SynthSpec(**{**self.synth, **overrides})

    def to_dict(self) -> dict:
        tc = self.train_config().to_dict()
        return {
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "train": {k: tc[k] for k in _TRAIN_KEYS},
            "inference": asdict(self.inference),
            "data": asdict(self.data),
            "synth": dict(self.synth),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys("config", d, [f.name for f in fields(cls)])
        try:
            model = ModelConfig(**_section(d, "model", ModelConfig))
            loss = LossConfig(**_section(d, "loss", LossConfig))
            train = dict(d.get("train", {}))
            _check_keys("train", train, _TRAIN_KEYS)
            cfg = cls(model, loss, train, InferenceOptions(**_section(d, "inference", InferenceOptions)),
                      DataPaths(**_section(d, "data", DataPaths)), dict(d.get("synth", {})))
            _check_keys("synth", cfg.synth, [f.name for f in fields(SynthSpec)])
            cfg.train_config()
            cfg.synth_spec().validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(doc)


def _check_keys(section: str, d, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _section(d: dict, name: str, kind) -> dict:
    sub = d.get(name, {})
    _check_keys(name, sub, [f.name for f in fields(kind)])
    return sub
