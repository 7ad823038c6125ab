"""Pipeline configuration: one YAML file plus ``key=value`` overrides."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .learner import TrainConfig
from .registration import RegistrationConfig
from .volume import Grid

WORKERS_ENV = "SOFTLABEL_WORKERS"


class ConfigError(ValueError):
    """Invalid configuration or command-line input (exit status 2)."""


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


@dataclass(frozen=True)
class CanonicalGrid:
    """In-plane matrix and spacing the learner works on; slices keep their native geometry."""

    enabled: bool = True
    in_plane_dims: tuple[int, int] = (256, 256)
    in_plane_spacing: tuple[float, float] = (1.6, 1.6)

    def target(self, grid: Grid) -> Grid:
        """Canonical grid sharing ``grid``'s orientation, z sampling and FOV centre."""
        if not self.enabled:
            return grid
        dims = (*self.in_plane_dims, grid.dims[2])
        spacing = (*self.in_plane_spacing, grid.spacing[2])
        centre_idx = (np.asarray(grid.dims) - 1) / 2.0
        centre = grid.affine[:3, :3] @ centre_idx + np.asarray(grid.origin)
        half = (np.asarray(dims) - 1) / 2.0 * np.asarray(spacing)
        origin = centre - grid.orientation @ half
        return Grid(dims, spacing, tuple(origin), grid.orientation)


@dataclass(frozen=True)
class EvaluationConfig:
    mode: str = "argmax"
    threshold: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    canonical_grid: CanonicalGrid = field(default_factory=CanonicalGrid)
    calibration_bins: int = 20
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.calibration_bins < 1:
            raise ConfigError("calibration_bins must be positive")
        if self.evaluation.mode not in ("argmax", "threshold"):
            raise ConfigError(f"evaluation.mode must be argmax or threshold, got {self.evaluation.mode!r}")
        if not 0 < self.evaluation.threshold <= 1:
            raise ConfigError("evaluation.threshold must be in (0, 1]")

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.training, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["training"].pop("seed")
        return _plain(d)

    def config_hash(self) -> str:
        """Hash of everything that can change outputs (worker count excluded)."""
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict | None, workers: int | None = None) -> "PipelineConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            training = dict(d.get("training") or {})
            if "seed" in training:
                raise ConfigError("set the seed at top level, not under training")
            kw = {
                "registration": RegistrationConfig.from_dict(d.get("registration")),
                "training": TrainConfig.from_dict(_tuples(training)),
                "canonical_grid": _sub(CanonicalGrid, d.get("canonical_grid"), "canonical_grid"),
                "evaluation": _sub(EvaluationConfig, d.get("evaluation"), "evaluation"),
            }
            for key in ("calibration_bins", "seed"):
                if key in d:
                    kw[key] = int(d[key])
            kw["workers"] = int(d["workers"]) if "workers" in d else (workers or default_workers())
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path=None, overrides: Sequence[str] = (), workers: int | None = None) -> "PipelineConfig":
        d = {}
        if path is not None:
            try:
                d = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(d, dict):
                raise ConfigError(f"{path}: config must be a mapping")
        for item in overrides:
            apply_override(d, item)
        return cls.from_dict(d, workers)


def apply_override(d: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc
    node = d
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a scalar")
    node[parts[-1]] = value


def _sub(kind, d, name):
    d = _tuples(dict(d or {}))
    unknown = set(d) - {f.name for f in fields(kind)}
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return kind(**d)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
