"""Run configuration: JSON files, validation and dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .field import SamplingConfig
from .matching import LossConfig
from .model import ModelConfig
from .train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Where scenes come from and how views are drawn from them.

    With ``scenes_dir`` unset, ``num_scenes`` scenes are generated from the
    run seed. ``holdout`` reserves about 20% of scenes for validation.
    """

    scenes_dir: str | None = None
    num_scenes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    poses_per_scene: int = 1
    heldout_poses: int = 1
    pose_radius: float = 3.5
    holdout: bool = False

    def __post_init__(self):
        if self.num_scenes < 1 or self.poses_per_scene < 1:
            raise ValueError("num_scenes and poses_per_scene must be at least 1")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


SECTIONS = {
    "model": ModelConfig,
    "sampling": SamplingConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        out = {"version": self.version, "seed": self.seed}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out


REQUIRED_TOP = ("version",)


def _coerce(value: Any, default: Any, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace("+", ",").split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(name: str, raw: dict):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in REQUIRED_TOP:
        if key not in raw:
            raise ConfigError(f"missing required config key '{key}'")
    for key in raw:
        if key not in ("version", "seed") and key not in SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw['version']!r} (expected {CONFIG_VERSION})")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    sections = {name: _build_section(name, raw.get(name, {})) for name in SECTIONS}
    return RunConfig(version=CONFIG_VERSION, seed=seed, **sections)


def load(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(raw)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, text = item.split("=", 1)
        parts = path.strip().split(".")
        target = raw
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise ConfigError(f"unknown config key '{path}'")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config key '{path}'")
        target[parts[-1]] = parse_value(text)
    return from_dict(raw)


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
