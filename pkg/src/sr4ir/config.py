"""Flat ``key = value`` experiment configs with dotted namespaces.

    # comment
    data.num_classes = 8
    train.lr_sr = 0.001
    run.scenarios = LR_to_T, SR4IR

Unknown keys, bad values and broken invariants are errors that name the key.
``emit`` writes every key, so ``parse(emit(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .data import DatasetSpec
from .imaging import DegradationConfig
from .nets import SEGMENTATION, NetConfig
from .trainer import SCENARIOS, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class RunSettings:
    scenarios: tuple[str, ...] = ("LR_to_T", "SR4IR")
    seeds: tuple[int, ...] = (0,)
    matrix: tuple[str, ...] = ()  # explicit "scenario:seed" pairs; overrides scenarios x seeds
    output_dir: str = "runs"
    checkpoint_every: int = 1  # epochs; 0 keeps only the final checkpoint


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    run: RunSettings = field(default_factory=RunSettings)

    def run_matrix(self) -> list[tuple[str, int]]:
        if self.run.matrix:
            pairs = []
            for item in self.run.matrix:
                scen, _, seed = item.partition(":")
                pairs.append((scen, int(seed)))
        else:
            pairs = [(s, seed) for s in self.run.scenarios for seed in self.run.seeds]
        return pairs

    def run_id(self, scenario: str, seed: int) -> str:
        return f"{scenario}-s{seed}"

    def train_for(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)


# the net's scale and class count follow the dataset, so they are not keys
_NET_DERIVED = {"scale", "num_classes"}
_TRAIN_DERIVED = {"seed"}


def _data_fields():
    out = {}
    for f in fields(DatasetSpec):
        if f.name == "degradation":
            out["scale"] = 4
            out["blur_std"] = None
        else:
            out[f.name] = f.default
    return out


def _schema():
    """key -> (default value, kind)."""
    schema = {}
    for f in fields(NetConfig):
        if f.name not in _NET_DERIVED:
            schema[f"net.{f.name}"] = f.default
    for f in fields(TrainConfig):
        if f.name not in _TRAIN_DERIVED:
            schema[f"train.{f.name}"] = f.default
    for name, default in _data_fields().items():
        schema[f"data.{name}"] = default
    for f in fields(RunSettings):
        schema[f"run.{f.name}"] = f.default
    return schema


SCHEMA = _schema()
FLOAT_OR_NONE = {"data.blur_std"}
INT_TUPLES = {"run.seeds"}
FLOAT_TUPLES = {"data.stripe_periods"}


def _convert(key: str, raw: str):
    default = SCHEMA[key]
    raw = raw.strip()
    try:
        if key in FLOAT_OR_NONE:
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if key in INT_TUPLES:
                return tuple(int(p) for p in items)
            if key in FLOAT_TUPLES:
                return tuple(float(p) for p in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(key, f"bad value {raw!r} ({exc})") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = _convert(key, raw)
    return values


def parse_overrides(items) -> dict:
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = _convert(key, raw)
    return values


def build(values: dict) -> ExperimentConfig:
    """Defaults overlaid with ``values``; every invariant is checked here."""
    merged = {k: values.get(k, v) for k, v in SCHEMA.items()}
    group = lambda ns: {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith(ns + ".")}

    d = group("data")
    try:
        deg = DegradationConfig(scale=d.pop("scale"), blur_std=d.pop("blur_std"))
    except ValueError as exc:
        raise ConfigError("data.scale", str(exc)) from None
    data = _checked("data", DatasetSpec, degradation=deg, **d)

    n = group("net")
    classes = data.num_classes + (1 if n["task_kind"] == SEGMENTATION else 0)
    net = _checked("net", NetConfig, scale=deg.scale, num_classes=classes, **n)
    train = _checked("train", TrainConfig, **group("train"))
    run = _checked("run", RunSettings, **group("run"))

    cfg = ExperimentConfig(net, train, data, run)
    try:
        matrix = cfg.run_matrix()
    except ValueError:
        raise ConfigError("run.matrix", "entries must look like scenario:seed") from None
    if not matrix:
        raise ConfigError("run.scenarios", "run matrix is empty")
    for scen, seed in matrix:
        if scen not in SCENARIOS:
            raise ConfigError("run.scenarios", f"unknown scenario {scen!r}; choose from {SCENARIOS}")
        if seed < 0:
            raise ConfigError("run.seeds", "seeds must be >= 0")
    ids = [cfg.run_id(*p) for p in matrix]
    if len(set(ids)) != len(ids):
        raise ConfigError("run.matrix", "run ids must be unique")
    if run.checkpoint_every < 0:
        raise ConfigError("run.checkpoint_every", "must be >= 0")
    return cfg


def _checked(ns: str, cls, **kwargs):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        key = next((f"{ns}.{k}" for k in kwargs if f"{ns}.{k}" in msg or f" {k}" in msg), ns)
        raise ConfigError(key, msg) from None


def flatten(cfg: ExperimentConfig) -> dict:
    out = {}
    for k in SCHEMA:
        ns, name = k.split(".", 1)
        if ns == "data" and name == "scale":
            out[k] = cfg.data.degradation.scale
        elif ns == "data" and name == "blur_std":
            out[k] = cfg.data.degradation.blur_std
        else:
            out[k] = getattr(getattr(cfg, ns), name)
    return out


def emit(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {_format(v)}" for k, v in flatten(cfg).items()]
    return "\n".join(lines) + "\n"


def parse(text: str = "", overrides=None) -> ExperimentConfig:
    values = parse_text(text)
    values.update(parse_overrides(overrides))
    return build(values)


def load(path: str | None = None, overrides=None) -> ExperimentConfig:
    text = ""
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(path, "config file not found")
        with open(path) as f:
            text = f.read()
    values = parse_text(text, source=path or "<config>")
    values.update(parse_overrides(overrides))
    return build(values)


def write_resolved(cfg: ExperimentConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved")
    with open(path, "w") as f:
        f.write(emit(cfg))
    return path
