"""Experiment configuration: nested dataclasses loaded from JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .corpus import CorpusConfig
from .grasp_data import SamplerConfig
from .grasp_model import GraspTrainConfig
from .pointsdf import PointSdfConfig, SdfTrainConfig
from .solver import SolverOptions


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class PlanningCorpusConfig:
    """Tabletop views used to train the model behind the reconstruction constraint."""

    families: tuple = ("sphere", "box", "cylinder")
    shapes_per_family: int = 8
    views_per_shape: int = 25
    cameras: tuple = ("high", "low")
    epochs: int = 80


@dataclass
class ReconEvalConfig:
    train_views: int = 10
    heldout_views: int = 10
    resolution: int = 64
    iou_samples: int = 100_000
    surface_samples: int = 10_000


@dataclass
class GraspDataConfig:
    families: tuple = ("sphere", "box", "cylinder")
    scenes_per_family: int = 60
    grasps_per_scene: int = 40
    camera: str = "high"
    test_fraction: float = 0.2
    sigma0: float = 0.002


@dataclass
class PlannerConfig:
    beta: float = -2.0
    alpha: float = 1.0
    margin: float = 0.005
    h_accept: float = 0.6
    value_accept: float = 5.0
    max_seeds: int = 5
    partial_radius: float = 0.005
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class CompareConfig:
    families: tuple = ("sphere", "box", "cylinder")
    scenes_per_family: int = 5
    cameras: tuple = ("high", "low")
    seed: int = 7


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    sdf_model: PointSdfConfig = field(default_factory=PointSdfConfig.lite)
    sdf_train: SdfTrainConfig = field(default_factory=lambda: SdfTrainConfig(epochs=120))
    recon_eval: ReconEvalConfig = field(default_factory=ReconEvalConfig)
    planning_corpus: PlanningCorpusConfig = field(default_factory=PlanningCorpusConfig)
    grasps: GraspDataConfig = field(default_factory=GraspDataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    classifier: GraspTrainConfig = field(default_factory=GraspTrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def validate(self):
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.grasps.camera not in ("high", "low"):
            raise ConfigError(f"unknown camera {self.grasps.camera!r}")
        if not 0 < self.grasps.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.planner.max_seeds < 1:
            raise ConfigError("max_seeds must be at least 1")
        if self.planner.margin < 0:
            raise ConfigError("margin must be nonnegative")
        return self

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Hash of everything that affects results; the output location does not."""
        body = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(body, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self):
        return {"seed": self.seed, "config_hash": self.digest(), "version": __version__}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    base = cls()
    kw = {}
    for name, value in data.items():
        default = getattr(base, name)
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name}: expected a list")
            kw[name] = tuple(value)
        elif isinstance(default, bool) or isinstance(default, str):
            if type(value) is not type(default):
                raise ConfigError(f"{where}.{name}: expected {type(default).__name__}")
            kw[name] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            if isinstance(default, int) and not float(value).is_integer():
                raise ConfigError(f"{where}.{name}: expected an integer")
            kw[name] = type(default)(value)
        else:
            kw[name] = value
    return dataclasses.replace(base, **kw)


def config_from_dict(data):
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path=None, seed=None, out=None):
    """Defaults, then the JSON file, then command-line overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(data)
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.out = str(out)
    return cfg.validate()
