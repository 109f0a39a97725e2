"""Pipeline configuration loaded from one YAML file."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backends import BackendDescriptor, Kind, stable_seed
from .errors import ConfigError, DomainError

# backends whose seed follows the global seed; embedders stay fixed so they match training
SEEDED_BACKENDS = {Kind.DIRECTOR: "plan", Kind.IMAGE_GEN: "actors", Kind.TTS: "voice"}


def sub_seed(seed: int, *name: Any) -> int:
    """Named child seed of the global seed."""
    return stable_seed(seed, *name) % 2**31


@dataclass
class PipelineConfig:
    story: str | None = None
    story_file: Path | None = None
    checkpoint: Path | None = None
    out: Path = Path("vlog_out")
    seed: int = 0
    fps: int = 8
    k: int = 1
    guidance_scale: float = 7.5
    steps: int = 50
    sampler: str = "ddpm"
    beta: float = 1.0
    workers: int = 1
    min_scene_s: float = 2.0
    max_scene_s: float = 60.0
    default_scene_s: float = 2.0
    backends: dict[str, dict] = field(default_factory=dict)
    # raw sections for `train`
    model: dict = field(default_factory=dict)
    toy: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __post_init__(self):
        for name in ("story_file", "checkpoint", "out", "base_dir"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, Path(v))
        for name in ("story_file", "checkpoint", "out"):
            v = getattr(self, name)
            if v is not None and not v.is_absolute():
                setattr(self, name, self.base_dir / v)
        if self.k < 1:
            raise ConfigError(f"k must be >= 1 at inference, got {self.k}")
        if self.guidance_scale < 1:
            raise ConfigError(f"guidance_scale must be >= 1, got {self.guidance_scale}")
        if self.steps < 1 or self.workers < 1 or self.fps <= 0:
            raise ConfigError("steps, workers and fps must be positive")
        unknown = set(self.backends) - {k.value for k in Kind}
        if unknown:
            raise ConfigError(f"unknown backend kinds: {sorted(unknown)}")

    @classmethod
    def from_yaml(cls, path: Path, **overrides) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw, base_dir=path.parent, **overrides)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path("."), **overrides) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
        try:
            return cls(base_dir=base_dir, **{k: v for k, v in merged.items() if k != "base_dir"})
        except (TypeError, DomainError) as exc:
            raise ConfigError(str(exc)) from exc

    def story_text(self) -> str:
        if self.story:
            return self.story
        if self.story_file is None:
            raise ConfigError("config needs `story` or `story_file`")
        if not self.story_file.is_file():
            raise ConfigError(f"story file not found: {self.story_file}")
        return self.story_file.read_text(encoding="utf-8")

    def descriptor(self, kind: Kind, **defaults) -> BackendDescriptor:
        raw = {**defaults, **self.backends.get(kind.value, {})}
        if kind in SEEDED_BACKENDS:
            raw["seed"] = sub_seed(self.seed, SEEDED_BACKENDS[kind])
        try:
            return BackendDescriptor.from_dict(kind, raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"backend {kind.value}: {exc}") from exc
