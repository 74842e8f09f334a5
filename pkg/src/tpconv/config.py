"""Run configuration: one JSON document covering data, model, training and
experiments, parsed strictly so that misspelled keys fail loudly."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .datagen import EntityProcessSpec, FieldProcessSpec, OffsetDistribution
from .model import ModelConfig
from .training import TrainConfig

TASK_DIMS = {"weather": (4, 4), "entity": (16, 13)}

# learning-rate ranges per (task, baseline)
DEFAULT_LR = {
    ("weather", "pointconv"): (1e-3, 1e-7),
    ("weather", "deepsets"): (1e-3, 3e-5),
    ("entity", "pointconv"): (1e-3, 1e-6),
    ("entity", "deepsets"): (3e-4, 1e-5),
}

# input (history) distributions of the cross-evaluation grid
INPUT_DISTRIBUTIONS = {
    "fixed1": {"kind": "fixed", "values": [-4, -3, -2, -1, 0]},
    "fixed2": {"kind": "fixed", "values": [-10, -8, -6, -4, -2]},
    "uniform": {"kind": "uniform", "a": -10, "b": 0, "count": 5},
    "half_normal": {"kind": "half_normal", "a": -10, "b": 0, "sigma": 5.0, "count": 5, "mode_at": "b"},
}

# query distributions of the loss-by-offset experiment
QUERY_DISTRIBUTIONS = {
    "fixed1": {"kind": "fixed", "values": [1, 2, 3]},
    "fixed2": {"kind": "fixed", "values": [1, 2, 4, 7]},
    "uniform": {"kind": "uniform", "a": 1, "b": 10, "count": 4},
    "half_normal": {"kind": "half_normal", "a": 1, "b": 10, "sigma": 5.0, "count": 4, "mode_at": "a"},
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_episodes: int = 40
    examples_per_episode: int = 50
    test_episodes: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    target_fraction: float = 0.1
    history: dict | None = None
    query: dict | None = None
    field_process: dict = field(default_factory=dict)
    entity_process: dict = field(default_factory=dict)
    csv: str | None = None  # episodes from file instead of the generator


@dataclass
class ExperimentConfig:
    input_distributions: list = field(default_factory=lambda: list(INPUT_DISTRIBUTIONS))
    query_distributions: list = field(default_factory=lambda: list(QUERY_DISTRIBUTIONS))
    max_query_offset: int = 15
    tradeoffs: list = field(default_factory=lambda: [0.2, 1.0, 5.0])
    anomaly_fraction: float = 0.33
    anomaly_magnitude: float = 0.25
    anomaly_corrupt_context: bool = True


@dataclass
class RunConfig:
    task: str = "weather"
    precision: str = "double"
    seed: int = 0
    model: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=dict)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    out: str | None = None  # default output directory; not part of the hash

    def __post_init__(self):
        if self.task not in TASK_DIMS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        # validate the sections that map onto other dataclasses
        self.model_config(**({"eps_s": 1.0} if self.model.get("eps_s") == "auto" else {}))
        self.train_config()
        self.history()
        self.query()
        self.field_spec()
        self.entity_spec()
        if self.data.csv is not None and not Path(self.data.csv).exists():
            raise ConfigError(f"data.csv does not exist: {self.data.csv}")

    # -------------------------------------------------------------- views

    def model_config(self, **overrides) -> ModelConfig:
        in_dim, target_dim = TASK_DIMS[self.task]
        base = {"in_dim": in_dim, "target_dim": target_dim}
        if self.task == "entity":
            base.update(temporal_kind="entity", query_kind="query_entity")
        merged = {**base, **self.model, **overrides}
        _check_keys("model", merged, ModelConfig)
        if merged.get("eps_s") == "auto":
            raise ConfigError("model.eps_s='auto' is resolved from data: pass eps_s explicitly")
        try:
            return ModelConfig(**merged)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"model: {err}") from None

    def train_config(self, baseline: str | None = None, **overrides) -> TrainConfig:
        baseline = baseline or self.model.get("baseline", "pointconv")
        lr_max, lr_min = DEFAULT_LR[(self.task, baseline)]
        merged = {"lr_max": lr_max, "lr_min": lr_min, "seed": self.seed,
                  "val_fraction": self.data.val_fraction, **self.train, **overrides}
        _check_keys("train", merged, TrainConfig)
        try:
            return TrainConfig(**merged)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"train: {err}") from None

    def history(self) -> OffsetDistribution | None:
        return _offsets("data.history", self.data.history)

    def query(self) -> OffsetDistribution | None:
        return _offsets("data.query", self.data.query)

    def field_spec(self) -> FieldProcessSpec:
        return _build("data.field_process", FieldProcessSpec, self.data.field_process)

    def entity_spec(self) -> EntityProcessSpec:
        return _build("data.entity_process", EntityProcessSpec, self.data.entity_process)

    # -------------------------------------------------------------- io

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out")
        text = json.dumps(doc, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        doc = self.to_dict()
        doc["seed"] = seed
        doc["data"]["seed"] = seed
        return RunConfig.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _check_keys("config", doc, cls)
        doc = dict(doc)
        if "data" in doc:
            _check_keys("data", doc["data"], DataConfig)
            doc["data"] = DataConfig(**doc["data"])
        if "experiment" in doc:
            _check_keys("experiment", doc["experiment"], ExperimentConfig)
            doc["experiment"] = ExperimentConfig(**doc["experiment"])
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


def _check_keys(section: str, doc: Any, cls) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")


def _build(section: str, cls, doc: dict):
    _check_keys(section, doc, cls)
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from None


def _offsets(section: str, doc: dict | None) -> OffsetDistribution | None:
    if doc is None:
        return None
    return _build(section, OffsetDistribution, doc)


def offset_distribution(spec: dict) -> OffsetDistribution:
    return _build("distribution", OffsetDistribution, spec)


def plain(obj):
    """JSON-ready copy of nested dataclasses / tuples / numpy scalars."""
    if is_dataclass(obj):
        return plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return obj.item()
    return obj
