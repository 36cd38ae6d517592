"""Run configuration: one JSON file with a section per concern; unknown keys are errors."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bridge import PDGains
from .dagger import FilterRule, InterventionRule
from .policy import PolicyConfig
from .trainer import TrainingConfig
from .worldgen import WorldConfig
from .worldsim import InputError


@dataclass(frozen=True)
class DataConfig:
    n_worlds: int = 40
    episodes_per_world: int = 10
    prefix: str = "w"
    stride: int = 4
    write_features: bool = False


@dataclass(frozen=True)
class EvalConfig:
    success_radius: float = 3.0
    max_steps: int = 200
    batch: int = 128


@dataclass(frozen=True)
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    latency: float = 0.0


@dataclass(frozen=True)
class PathsConfig:
    out: str = "run"
    worlds: str | None = None
    episodes: str | None = None
    eval_episodes: str | None = None
    data: str | None = None
    dagger: str | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: PolicyConfig = field(default_factory=PolicyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    stage2: TrainingConfig | None = None
    intervention: InterventionRule = field(default_factory=InterventionRule)
    filter: FilterRule = field(default_factory=FilterRule)
    eval: EvalConfig = field(default_factory=EvalConfig)
    control: PDGains = field(default_factory=PDGains)
    serve: ServeConfig = field(default_factory=ServeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(raw).hexdigest()

    def stage2_training(self) -> TrainingConfig:
        return self.stage2 if self.stage2 is not None else self.training


# nested dataclass sections and the class each one is built from
_SECTIONS = {
    "world": WorldConfig, "data": DataConfig, "model": PolicyConfig, "training": TrainingConfig,
    "stage2": TrainingConfig, "intervention": InterventionRule, "filter": FilterRule, "eval": EvalConfig,
    "control": PDGains, "serve": ServeConfig, "paths": PathsConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise InputError(f"config section {where!r} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise InputError(f"unknown config key(s) in {where!r}: {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        ftype = names[k].type
        if isinstance(ftype, str) and "tuple" in ftype and isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config section {where!r}: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise InputError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        if k in _SECTIONS:
            kw[k] = None if v is None else _build(_SECTIONS[k], v, k)
        else:
            kw[k] = v
    seed = kw.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        raise InputError("seed must be a nonnegative integer")
    return RunConfig(**kw)


def load(path) -> RunConfig:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(d)


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Replace fields inside sections, e.g. with_overrides(cfg, training={"seed": 3})."""
    changes = {}
    for name, values in sections.items():
        if not values:
            continue
        if name in _SECTIONS:
            base = getattr(cfg, name) or _SECTIONS[name]()
            merged = dict(dataclasses.asdict(base), **values)
            changes[name] = _build(_SECTIONS[name], merged, name)
        else:
            changes[name] = values
    return dataclasses.replace(cfg, **changes)
