"""Run configuration files: model, training, data and eval sections with strict keys.

The canonical text form is JSON with sorted keys and two-space indent, so
``emit(parse(text))`` is a fixed point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    seed: int = 0
    sequences: int = 576
    val_fraction: float = 1.0 / 9.0

    def __post_init__(self):
        if self.sequences < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("data.sequences must be >= 1 and data.val_fraction in [0, 1)")


@dataclass
class EvalConfig:
    sigmas: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    noise_seeds: int = 3
    mi_projections: int = 64
    mi_bins: int = 32
    figures: bool = True
    seed: int = 0

    def __post_init__(self):
        if any(s < 0 for s in self.sigmas):
            raise ConfigError("eval.sigmas must be >= 0")
        if self.noise_seeds < 1 or self.mi_projections < 1 or self.mi_bins < 2:
            raise ConfigError("eval.noise_seeds/mi_projections must be >= 1 and mi_bins >= 2")


SECTIONS = {"model": ModelConfig, "training": TrainConfig, "data": DataConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def emit(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def override(self, section: str, **values) -> "RunConfig":
        d = self.to_dict()
        d[section].update({k: v for k, v in values.items() if v is not None})
        return from_dict(d)


def _section(cls, name: str, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    return RunConfig(**{name: _section(cls, name, d.get(name, {})) for name, cls in SECTIONS.items()})


def parse(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(d)


def load(path) -> RunConfig:
    return parse(Path(path).read_text())


def preset(name: str) -> RunConfig:
    """Named recipes: ``tiny`` (gradient checks), ``overfit``, ``desk`` and ``full``."""
    if name == "tiny":
        return from_dict({
            "model": {"frames": 4, "joints": 5, "dim": 8, "heads": 2, "encoder_layers": 2, "decoder_layers": 1},
            "data": {"sequences": 2, "val_fraction": 0.0},
        })
    if name == "overfit":
        return from_dict({
            "model": {"frames": 27, "joints": 17, "dim": 64, "heads": 8, "encoder_layers": 4},
            # Full-batch steps, 25 per epoch, without flips: enough to fit 8 windows in 500 steps.
            "training": {"max_steps": 500, "epochs": 20, "batch_size": 8, "epoch_repeats": 25,
                         "eval_every": 2, "eval_train": True, "flip_augment": False, "flip_test": False},
            "data": {"sequences": 8, "val_fraction": 0.0, "seed": 11},
        })
    if name == "desk":
        return RunConfig()
    if name == "full":
        return from_dict({"model": {"frames": 243, "encoder_layers": 12}})
    raise ConfigError(f"unknown preset {name!r}; expected tiny, overfit, desk or full")


PRESETS = ("tiny", "overfit", "desk", "full")
