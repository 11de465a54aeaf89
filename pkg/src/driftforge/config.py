"""Run configuration: TOML file over built-in defaults, ``DRIFTFORGE_*`` environment overrides, validation."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .mixups import MixKind
from .transforms import TransformKind

ENV_PREFIX = "DRIFTFORGE_"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key at fault."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataSection:
    paths: list[str] = field(default_factory=list)
    timestamp: str = "timestamp"
    open: str = "open"
    high: str = "high"
    low: str = "low"
    close: str = "close"
    volume: str = "volume"
    stock_column: str = "stock"
    indicators: list[str] = field(default_factory=list)


@dataclass
class SplitSection:
    ratios: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    lookback: int = 60
    stats_window: int = 60


@dataclass
class OperationsSection:
    transforms: list[str] = field(default_factory=lambda: [k.name.lower() for k in TransformKind])
    mixups: list[str] = field(default_factory=lambda: [k.name.lower() for k in MixKind])
    k: int = 3
    b_max: float = 0.5
    mi_bins: int = 16


@dataclass
class PolicySection:
    mode: str = "planned"
    lam: float = 0.5
    alpha: float = 0.5


@dataclass
class ModelSection:
    kind: str = "gru"
    hidden: int = 64
    feature_width: int = 128


@dataclass
class SchedulerSection:
    tau: float = 5.0
    delta: float = 1e-5


@dataclass
class TrainerSection:
    freq: int = 10
    beta: float = 1e-3
    start_epoch: int = 5
    patience: int = 5
    max_epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    gamma_risk: float = 0.05
    planner_hidden: int = 64
    planner_batch: int = 16
    valid_batch: int = 64


@dataclass
class EnvSection:
    initial_cash: float = 1e4
    cost: float = 1e-3
    discount: float = 0.99
    lookback: int = 60
    policy: str = "buy_and_hold"
    checkpoint: str = ""


@dataclass
class DiagnosticsSection:
    folds: int = 10
    psi_bins: int = 10
    mmd_points: int = 300
    max_lag: int = 10
    vol_window: int = 20
    synthetic_path: str = ""


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    operations: OperationsSection = field(default_factory=OperationsSection)
    policy: PolicySection = field(default_factory=PolicySection)
    model: ModelSection = field(default_factory=ModelSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    env: EnvSection = field(default_factory=EnvSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything that shapes results; the output directory is excluded."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def transform_kinds(self) -> tuple[TransformKind, ...]:
        return tuple(TransformKind[name.upper()] for name in self.operations.transforms)

    def mix_kinds(self) -> tuple[MixKind, ...]:
        return tuple(MixKind[name.upper()] for name in self.operations.mixups)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def _coerce(name: str, value: Any, current: Any) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, int) or (current is None and name == "seed"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return list(value)
    return value


def _merge(target: Any, updates: Mapping[str, Any], prefix: str = "") -> None:
    known = {f.name for f in fields(target)}
    for key, value in updates.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(name, "unknown key")
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(name, "expected a table")
            _merge(current, value, f"{name}.")
        else:
            setattr(target, key, _coerce(name, value, current))


def _parse_env_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """``DRIFTFORGE_SEED=3`` sets ``seed``; ``DRIFTFORGE_TRAINER__START_EPOCH=2`` sets ``trainer.start_epoch``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env_value(raw)
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    check_paths: bool = True,
) -> RunConfig:
    """Defaults, then the file, then environment, then explicit overrides (e.g. CLI flags)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        try:
            with open(p, "rb") as fh:
                _merge(cfg, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"cannot parse {p}: {exc}") from None
        base = p.parent
        cfg.data.paths = [str(base / q) if not Path(q).is_absolute() else q for q in cfg.data.paths]
    _merge(cfg, env_overrides(environ))
    if overrides:
        _merge(cfg, overrides)
    validate(cfg, check_paths)
    return cfg


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _require(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(name, message)


def validate(cfg: RunConfig, check_paths: bool = True) -> None:
    _require(cfg.seed is not None, "seed", "a seed is mandatory (set it in the file, via --seed or DRIFTFORGE_SEED)")
    r = cfg.split.ratios
    _require(len(r) == 3 and all(isinstance(x, (int, float)) and x > 0 for x in r), "split.ratios", f"need three positive fractions, got {r}")
    _require(abs(sum(r) - 1.0) <= 1e-9, "split.ratios", f"must sum to 1, sum to {sum(r)!r}")
    _require(cfg.split.lookback >= 2, "split.lookback", "must be at least 2")
    _require(cfg.split.stats_window >= 2, "split.stats_window", "must be at least 2")
    for name in cfg.operations.transforms:
        _require(name.upper() in TransformKind.__members__, "operations.transforms", f"unknown transform {name!r}")
    for name in cfg.operations.mixups:
        _require(name.upper() in MixKind.__members__, "operations.mixups", f"unknown mix-up {name!r}")
    _require(len(cfg.operations.transforms) >= 1, "operations.transforms", "at least one transform is required")
    _require(cfg.operations.k >= 1, "operations.k", "must be positive")
    _require(0.0 <= cfg.operations.b_max <= 1.0, "operations.b_max", "must lie in [0, 1]")
    _require(cfg.operations.mi_bins >= 2, "operations.mi_bins", "must be at least 2")
    _require(cfg.policy.mode in ("planned", "fixed", "none"), "policy.mode", "must be planned, fixed or none")
    _require(0.0 <= cfg.policy.lam <= 1.0, "policy.lam", "must lie in [0, 1]")
    _require(0.0 <= cfg.policy.alpha <= 1.0, "policy.alpha", "must lie in [0, 1]")
    _require(cfg.model.kind in ("gru", "linear"), "model.kind", "must be gru or linear")
    _require(cfg.model.hidden >= 1, "model.hidden", "must be positive")
    _require(cfg.model.feature_width >= 1, "model.feature_width", "must be positive")
    _require(cfg.scheduler.tau > 0, "scheduler.tau", "must be positive")
    _require(cfg.scheduler.delta >= 0, "scheduler.delta", "must be non-negative")
    t = cfg.trainer
    _require(t.freq >= 1, "trainer.freq", "must be at least 1")
    _require(t.beta >= 0, "trainer.beta", "must be non-negative")
    _require(t.start_epoch >= 0, "trainer.start_epoch", "must be non-negative")
    _require(t.patience >= 1, "trainer.patience", "must be positive")
    _require(t.max_epochs >= 1, "trainer.max_epochs", "must be positive")
    _require(t.batch_size >= 1, "trainer.batch_size", "must be positive")
    _require(t.lr > 0, "trainer.lr", "must be positive")
    _require(t.gamma_risk >= 0, "trainer.gamma_risk", "must be non-negative")
    _require(0.0 <= cfg.env.cost < 0.1, "env.cost", "must lie in [0, 0.1)")
    _require(cfg.env.initial_cash > 0, "env.initial_cash", "must be positive")
    _require(cfg.env.lookback >= 1, "env.lookback", "must be positive")
    _require(cfg.env.policy in ("buy_and_hold", "random", "model"), "env.policy", "must be buy_and_hold, random or model")
    _require(cfg.diagnostics.folds >= 1, "diagnostics.folds", "must be positive")
    _require(cfg.diagnostics.psi_bins >= 2, "diagnostics.psi_bins", "must be at least 2")
    _require(cfg.diagnostics.max_lag >= 1, "diagnostics.max_lag", "must be positive")
    if check_paths:
        for p in cfg.data.paths:
            _require(Path(p).is_file(), "data.paths", f"file not found: {p}")


# ---------------------------------------------------------------------------
# Defaults as TOML
# ---------------------------------------------------------------------------


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r}")


def defaults_toml() -> str:
    d = copy.deepcopy(RunConfig().to_dict())
    lines = ["# seed is mandatory; no wall-clock seeding", "seed = 0", f"out = {_toml_value(d['out'])}"]
    for section, values in d.items():
        if not isinstance(values, dict):
            continue
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
    return "\n".join(lines) + "\n"
