"""Run configuration: one document with ``world``, ``train``, ``loss`` and
``experiment`` sections, loaded from TOML or JSON and patched by dotted
overrides such as ``train.lr=3e-4``."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .experiments import ExperimentConfig
from .losses import HyperParams
from .synthdata import WorldConfig
from .trainer import TrainConfig

SECTIONS = ("world", "train", "loss", "experiment")


class ConfigError(ValueError):
    pass


def _section_types() -> dict:
    train_fields = {f.name: f for f in fields(TrainConfig) if f.name != "hyperparams"}
    return {
        "world": {f.name: f for f in fields(WorldConfig)},
        "train": train_fields,
        "loss": {f.name: f for f in fields(HyperParams)},
        "experiment": {f.name: f for f in fields(ExperimentConfig)},
    }


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        loss = train.pop("hyperparams")
        return {"world": asdict(self.world), "train": train, "loss": loss,
                "experiment": self.experiment.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        types = _section_types()
        for sec in SECTIONS:
            bad = set(doc.get(sec, {})) - set(types[sec])
            if bad:
                raise ConfigError(f"unknown keys in [{sec}]: {sorted(bad)}")
        try:
            hp = HyperParams(**doc.get("loss", {}))
            return cls(WorldConfig(**doc.get("world", {})),
                       TrainConfig(**doc.get("train", {}), hyperparams=hp),
                       ExperimentConfig(**doc.get("experiment", {})))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def read_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return [_parse_value(x.strip(), kind()) for x in raw.split(",") if x.strip()]
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def apply_overrides(doc: dict, overrides: list) -> dict:
    """Patch ``doc`` with ``(dotted_key, raw_string)`` pairs typed by field defaults."""
    doc = {k: dict(v) for k, v in doc.items()}
    defaults = RunConfig().to_dict()
    types = _section_types()
    for key, raw in overrides:
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or name not in types[sec]:
            raise ConfigError(f"unknown option --{key}")
        default = defaults[sec][name]
        if isinstance(default, list):
            default = tuple(default)
        doc.setdefault(sec, {})[name] = _parse_value(raw, default)
    return doc


def resolve(path=None, overrides=(), seed=None, threads=None) -> RunConfig:
    """Load, override and validate. ``seed`` reseeds the world, the training
    run and the experiment seed list (shifted to start at ``seed``)."""
    doc = read_document(path) if path else {}
    doc = apply_overrides(doc, list(overrides))
    if seed is not None:
        doc.setdefault("world", {})["seed"] = seed
        doc.setdefault("train", {})["seed"] = seed
        n = len(doc.get("experiment", {}).get("seeds", ExperimentConfig().seeds))
        doc.setdefault("experiment", {})["seeds"] = [seed + i for i in range(n)]
    if threads is not None:
        doc.setdefault("experiment", {})["threads"] = threads
    try:
        return RunConfig.from_dict(doc)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
