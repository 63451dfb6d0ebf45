"""Run configuration and its strict JSON mapping."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .genome import MAX_NODES, MIN_NODES, MutationRates, check_node_range
from .network import NetworkConfig, TrainSchedule

EVALUATORS = ("trainer", "surrogate")
DATA_KINDS = ("synthetic", "folder")


@dataclass(frozen=True)
class DataConfig:
    """Where the task stream comes from. Only the CLI reads this."""

    kind: str = "synthetic"
    num_tasks: int = 3
    classes_per_task: int = 4
    samples_per_class: int = 200
    image_size: int = 8
    difficulty: float = 0.3
    seed: int = 0
    root: str | None = None
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    shuffle_classes: bool = False

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.kind == "folder" and not self.root:
            raise ConfigError("data.root is required when data.kind is 'folder'")
        object.__setattr__(self, "ratios", tuple(self.ratios))


@dataclass(frozen=True)
class EclConfig:
    population_size: int = 20
    generations_first: int = 10
    generations_later: int = 5
    search_schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(10, 0.1, 0.001))
    full_schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(200, 0.1, 1e-5))
    search_net: NetworkConfig = field(default_factory=lambda: NetworkConfig(16, 1))
    full_net: NetworkConfig = field(default_factory=lambda: NetworkConfig(64, 3))
    mutation_rates: MutationRates = field(default_factory=MutationRates)
    node_range: tuple[int, int] = (MIN_NODES, MAX_NODES)
    master_seed: int = 0
    evaluator: str = "trainer"
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        object.__setattr__(self, "node_range", check_node_range(self.node_range))
        for name in ("population_size", "generations_first", "generations_later"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.population_size < 2:
            raise ConfigError("population_size must be at least 2 for binary tournaments")
        if self.evaluator not in EVALUATORS:
            raise ConfigError(f"evaluator must be one of {EVALUATORS}, got {self.evaluator!r}")

    def generations_for(self, task_id: int) -> int:
        return self.generations_first if task_id == 0 else self.generations_later

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "EclConfig":
        return _build(cls, data, "config")


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}")
        elif typing.get_origin(hint) is tuple:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path) -> EclConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return EclConfig.from_dict(data)
