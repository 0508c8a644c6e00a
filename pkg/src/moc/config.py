"""Run configuration: generator, training and evaluation settings in one JSON document."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .detector import TrainConfig
from .evaluation import FEW_SHOT_SIZES, DetectionMatchConfig
from .losses import MotionLossWeights
from .schedule import ScheduleParams
from .synthgen import GeneratorConfig, HudObject, SpriteClass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    criterion: str = "center_divergence"
    threshold: float = 0.5
    all_objects: bool = False
    ami_average: str = "max"
    few_shot_sizes: tuple[int, ...] = FEW_SHOT_SIZES
    ridge_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "few_shot_sizes", tuple(self.few_shot_sizes))
        if self.ami_average not in ("max", "mean"):
            raise ValueError("ami_average must be 'max' or 'mean'")
        if any(n < 1 for n in self.few_shot_sizes) or self.ridge_alpha <= 0:
            raise ValueError("few-shot sizes must be positive and ridge_alpha > 0")
        self.match_config()

    def match_config(self) -> DetectionMatchConfig:
        return DetectionMatchConfig(self.criterion, self.threshold)


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {"generator": self.generator.to_dict(), "train": self.train.to_dict(), "eval": dataclasses.asdict(self.eval)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# nested dataclass fields whose keys are checked too
_NESTED = {
    (GeneratorConfig, "classes"): SpriteClass,
    (GeneratorConfig, "hud"): HudObject,
    (TrainConfig, "motion_weights"): MotionLossWeights,
    (TrainConfig, "schedule"): ScheduleParams,
}


def _check_keys(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            raise ConfigError(f"unknown config key '{path}'")
        inner = _NESTED.get((cls, key))
        if inner is None:
            continue
        if isinstance(value, list):
            for i, item in enumerate(value):
                _check_keys(inner, item, f"{path}[{i}]")
        else:
            _check_keys(inner, value, path)


def parse_config(data: Mapping) -> RunConfig:
    """Build a :class:`RunConfig`; unknown keys anywhere raise :class:`ConfigError`."""
    sections = {"generator": GeneratorConfig, "train": TrainConfig, "eval": EvalConfig}
    if not isinstance(data, Mapping):
        raise ConfigError("config: expected an object")
    for key in data:
        if key not in sections:
            raise ConfigError(f"unknown config key '{key}'")
    built = {}
    for name, cls in sections.items():
        part = data.get(name, {})
        _check_keys(cls, part, name)
        try:
            built[name] = cls(**part)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from e
    try:
        built["generator"].validate()
    except ValueError as e:
        raise ConfigError(f"generator: {e}") from e
    return RunConfig(**built)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(data)
