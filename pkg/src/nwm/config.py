"""Run configuration: one JSON document covering every stage, with strict keys and a stable hash."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .cdit import ModelConfig
from .diffusion import TrainConfig
from .io import canonical_json, config_hash


@dataclass
class DataConfig:
    train_episodes: int = 200
    val_episodes: int = 60
    train_maps: tuple[int, int] = (0, 20)  # half-open range of map seeds
    val_maps: tuple[int, int] = (100, 110)
    length: int = 32
    fps: float = 4.0
    noise_level: float = 0.05
    resolution: int = 32
    min_length: int = 8


@dataclass
class ScheduleConfig:
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class PlannerConfig:
    population: int = 120
    elite_fraction: float = 0.1
    iterations: int = 1
    mean: tuple[float, float, float] = (0.3, 0.0, 0.0)
    var: tuple[float, float, float] = (0.05, 0.05, 0.1)
    steps: int = 8
    dt: float = 0.25
    var_floor: float = 1e-6
    constraint: str = "none"
    evals: int = 3
    penalty: float = 100.0
    feature_weight: float = 0.8
    oracle_step_size: float = 1.0
    sampling_steps: int = 10


@dataclass
class MetricConfig:
    horizons: tuple[float, ...] = (1.0, 2.0, 4.0)
    sampling_steps: int = 10
    eval_count: int = 50
    rpe_delta: int = 1
    rank_noise: float = 0.3


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "planner": PlannerConfig,
    "metrics": MetricConfig,
}


# seeds come from the top-level seed through named streams, never from a section
EXCLUDED = {"train": {"seed"}}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ValueError(f"{where} must be an object")
    known = {f.name for f in fields(cls)} - EXCLUDED.get(where, set())
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    defaults = cls()
    converted = {key: tuple(value) if isinstance(getattr(defaults, key), tuple) and isinstance(value, list) else value
                 for key, value in values.items()}
    return cls(**converted)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ValueError(f"unknown top-level key(s): {', '.join(unknown)}")
        seed = values.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ValueError("seed must be a non-negative integer")
        parts = {name: _build(section, values.get(name, {}), name) for name, section in SECTIONS.items()}
        return cls(seed=seed, **parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            section = getattr(self, name)
            values = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
            out[name] = {k: v for k, v in values.items() if k not in EXCLUDED.get(name, set())}
        return json.loads(canonical_json(out))  # tuples become lists

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=stream_seed(self.seed, "train"))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def override(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, falling back to plain strings."""
        values = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form key=value")
            path, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            keys = path.split(".")
            node = values
            for key in keys[:-1]:
                if key not in node or not isinstance(node[key], dict):
                    raise ValueError(f"unknown config section in {path!r}")
                node = node[key]
            node[keys[-1]] = value
        return RunConfig.from_dict(values)


def stream_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named sub-stream (``data``, ``train``, ``sample``, ``plan``, ...)."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])
