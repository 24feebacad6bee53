"""Run configuration: an INI file whose sections mirror :class:`RunConfig`.

Example::

    [run]
    task = diagnosis
    epochs = 30
    batch_size = 16
    lr0 = 0.013
    weight_decay = 1e-4
    seed = 0
    fold = 0
    lr_grid = 0.03, 0.013, 0.0055, 0.0023, 0.001
    weight_decay_grid = 0, 1e-4, 1e-2

    [model]
    fusion_variant = daft
    block_channels = 16, 32, 64, 64

    [model.daft]
    location = before_conv1
    scale_activation = identity

    [data]
    n = 1000
    size = 16

    [paths]
    dataset = data/synth
    split = data/synth/split.csv
    out = runs/daft
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticConfig
from .fusion import DaftConfig, ModelConfig

LR_GRID = (0.03, 0.013, 0.0055, 0.0023, 1e-3)
WEIGHT_DECAY_GRID = (0.0, 1e-4, 1e-2)


class ConfigError(ValueError):
    """Invalid configuration; the message lists every offending key."""


@dataclass
class Paths:
    dataset: str | None = None
    split: str | None = None
    out: str = "runs"


@dataclass
class RunConfig:
    task: str = "diagnosis"
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int | None = None
    batch_size: int = 16
    lr0: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    fold: int = 0
    lr_grid: tuple = LR_GRID
    weight_decay_grid: tuple = WEIGHT_DECAY_GRID
    workers: int = 1
    data: SyntheticConfig | None = None
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        errors = []
        if self.task not in ("diagnosis", "survival"):
            errors.append(f"run.task: must be diagnosis or survival, got {self.task!r}")
        if self.model.task != self.task:
            errors.append(f"model.task: {self.model.task!r} disagrees with run.task {self.task!r}")
        if self.epochs is not None and self.epochs < 1:
            errors.append("run.epochs: must be positive")
        if self.batch_size < 2:
            errors.append("run.batch_size: must be at least 2")
        if self.lr0 < 0:
            errors.append("run.lr0: must be non-negative")
        if self.weight_decay < 0:
            errors.append("run.weight_decay: must be non-negative")
        if not self.lr_grid:
            errors.append("run.lr_grid: grid is empty")
        if not self.weight_decay_grid:
            errors.append("run.weight_decay_grid: grid is empty")
        if self.workers < 1:
            errors.append("run.workers: must be at least 1")
        if not 0 <= self.fold < 5:
            errors.append("run.fold: must lie in 0..4")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def total_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 30 if self.task == "diagnosis" else 80

    def grid(self) -> list[tuple[float, float]]:
        return [(lr, wd) for lr in self.lr_grid for wd in self.weight_decay_grid]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["lr_grid"], d["weight_decay_grid"] = list(self.lr_grid), list(self.weight_decay_grid)
        return d


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _parser_for(tp):
    """Map a dataclass field annotation (a string under postponed evaluation) to a parser."""
    tp = str(tp)
    if tp.startswith("bool"):
        return _bool
    if tp.startswith("int | None"):
        return _optional_int
    if tp.startswith("int"):
        return int
    if tp.startswith("float"):
        return float
    if tp.startswith("str | None"):
        return lambda s: None if s.strip().lower() in ("", "none") else s
    return str


RUN_PARSERS = {"task": str, "epochs": _optional_int, "batch_size": int, "lr0": float, "weight_decay": float,
               "seed": int, "fold": int, "lr_grid": _floats, "weight_decay_grid": _floats, "workers": int}
MODEL_TUPLES = {"block_channels": _ints, "block_strides": _ints}
DATA_TUPLES = {"class_fractions": _floats}


def _section(cp, name, cls, special, errors) -> dict:
    if not cp.has_section(name):
        return {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in cp.items(name):
        if key in special:
            parse = special[key]
        elif key in known and key not in ("daft",):
            parse = _parser_for(known[key].type)
        else:
            errors.append(f"{name}.{key}: unknown key")
            continue
        try:
            out[key] = parse(raw)
        except ValueError as exc:
            errors.append(f"{name}.{key}: {exc}")
    return out


def parse_config(text: str, base_dir=None) -> RunConfig:
    """Parse INI text into a validated RunConfig, reporting every bad key at once."""
    cp = configparser.ConfigParser(interpolation=None, defaults=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    errors = []
    for sec in cp.sections():
        if sec not in ("run", "model", "model.daft", "data", "paths"):
            errors.append(f"{sec}: unknown section")
    run = _section(cp, "run", RunConfig, RUN_PARSERS, errors)
    model = _section(cp, "model", ModelConfig, MODEL_TUPLES, errors)
    daft = _section(cp, "model.daft", DaftConfig, {}, errors)
    data = _section(cp, "data", SyntheticConfig, DATA_TUPLES, errors)
    paths = _section(cp, "paths", Paths, {}, errors)
    task = run.get("task", "diagnosis")
    data.setdefault("task", task)
    if base_dir is not None:
        for key in ("dataset", "split", "out"):
            if paths.get(key) and not Path(paths[key]).is_absolute():
                paths[key] = str(Path(base_dir) / paths[key])
    # build every part even after earlier failures so one message lists every bad key
    built = {}
    for label, make in (("model.daft", lambda: DaftConfig(**daft)),
                        ("model", lambda: ModelConfig(task=task, daft=built.get("model.daft", DaftConfig()), **model)),
                        ("data", lambda: SyntheticConfig(**data) if cp.has_section("data") else None)):
        try:
            built[label] = make()
        except (ValueError, TypeError, KeyError) as exc:
            errors.append(f"{label}: {exc}")
    model_cfg = built.get("model")
    if model_cfg is None:
        try:
            model_cfg = ModelConfig(task=task)
        except ValueError:
            model_cfg = ModelConfig()
    try:
        cfg = RunConfig(model=model_cfg, data=built.get("data"), paths=Paths(**paths), **run)
    except ConfigError as exc:
        errors.append(str(exc))
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return "none" if value is None else str(value)


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`parse_config` maps back to an equal RunConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {k: _fmt(getattr(cfg, k)) for k in RUN_PARSERS}
    model = cfg.model.to_dict()
    daft = model.pop("daft")
    model.pop("task")
    cp["model"] = {k: _fmt(v) for k, v in model.items()}
    cp["model.daft"] = {k: _fmt(v) for k, v in daft.items()}
    if cfg.data is not None:
        data = dataclasses.asdict(cfg.data)
        data.pop("task")
        cp["data"] = {k: _fmt(v) for k, v in data.items()}
    cp["paths"] = {k: _fmt(v) for k, v in dataclasses.asdict(cfg.paths).items() if v is not None}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
