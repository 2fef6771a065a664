"""Experiment configuration files.

Configs are TOML documents with fixed sections; see ``docs/config.md`` for
the full grammar. Every value is validated on load and errors name the
offending key path, e.g. ``data.n_source``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import __version__
from .envs import BUILTIN_ENVS
from .shifts import ShiftKind, ShiftSpec

SEED_ENV_VAR = "RADT_LAB_SEED"
ALL_METHODS = ("1T", "10T", "1T10S", "RADT-DARA", "RADT-MV", "RADT-MV-empirical", "RADT-ExactCDF")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class EnvSection:
    name: str = "chainwalk"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ShiftSection:
    kind: str = "transition_perturb"
    magnitude: float = 0.5
    seed: int = 0

    def spec(self) -> ShiftSpec:
        return ShiftSpec(self.kind, self.magnitude, self.seed)


@dataclass(frozen=True)
class DataSection:
    n_target_small: int = 50
    n_target_large: int = 500
    n_source: int = 500
    behavior: str = "uniform"
    epsilon: float = 0.3


@dataclass(frozen=True)
class AugmentSection:
    eta: float = 0.1
    dara_clamp: float = 10.0
    clip_lo: float = 0.9
    clip_hi: float = 1.25
    sigma_floor: float = 1e-6
    estimator: str = "fitted_value"
    n_action_samples: int = 10
    temperature: float = 1.0
    value_target: str = "optimal"
    time_indexed: bool = True


@dataclass(frozen=True)
class ClassifierSection:
    lr: float = 0.05
    epochs: int = 200
    batch: int = 256
    l2: float = 1e-5


@dataclass(frozen=True)
class LearnerSection:
    kind: str = "tabular"
    bin_width: float = 1.0
    smoothing: float = 0.0
    time_indexed: bool = True
    width: int = 64
    lr: float = 3e-4
    epochs: int = 100
    batch: int = 64


@dataclass(frozen=True)
class EvalSection:
    f_grid: tuple = ()  # empty: dataset-return quantiles {0.5, 0.9, 1.0} plus max
    n_rollouts: int = 1000
    methods: tuple = ALL_METHODS


@dataclass(frozen=True)
class RateStudySection:
    n_grid: tuple = (200, 800, 3200, 12800)
    target_fraction: float = 1.0 / 11.0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    root_seed: int = 0
    seeds: tuple = tuple(range(20))
    output_dir: str = "radt_out"
    env: EnvSection = EnvSection()
    shift: ShiftSection = ShiftSection()
    data: DataSection = DataSection()
    augment: AugmentSection = AugmentSection()
    classifier: ClassifierSection = ClassifierSection()
    learner: LearnerSection = LearnerSection()
    eval: EvalSection = EvalSection()
    rate_study: RateStudySection = RateStudySection()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        """Hash of every setting that can change results; ``output_dir`` is left out."""
        doc = self.to_dict()
        doc.pop("output_dir")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def stamp(self) -> dict:
        """Provenance fields embedded in every output file."""
        return {"config_hash": self.config_hash(), "tool_version": __version__, "root_seed": self.root_seed}


_SECTIONS = {
    "env": EnvSection,
    "shift": ShiftSection,
    "data": DataSection,
    "augment": AugmentSection,
    "classifier": ClassifierSection,
    "learner": LearnerSection,
    "eval": EvalSection,
    "rate_study": RateStudySection,
}
_TOP_KEYS = {"name", "root_seed", "seeds", "output_dir"}


def _coerce(key: str, value, default):
    """Type-check ``value`` against the type of ``default``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected a table, got {value!r}")
        return dict(value)
    return value  # pragma: no cover


def _section(name: str, cls, doc: dict):
    default = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        values[key] = _coerce(f"{name}.{key}", value, getattr(default, key))
    return cls(**values)


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _check(cfg.root_seed >= 0, "root_seed", "must be non-negative")
    _check(len(cfg.seeds) >= 1, "seeds", "need at least one seed")
    _check(all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds), "seeds", "seeds must be non-negative integers")
    _check(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "seeds must be distinct")
    _check(cfg.env.name in BUILTIN_ENVS, "env.name", f"unknown environment, choose from {sorted(BUILTIN_ENVS)}")
    _check(cfg.shift.kind in {k.value for k in ShiftKind}, "shift.kind", f"unknown shift kind {cfg.shift.kind!r}")
    _check(0.0 <= cfg.shift.magnitude <= 1.0, "shift.magnitude", "must lie in [0, 1]")
    _check(cfg.shift.seed >= 0, "shift.seed", "must be non-negative")
    d = cfg.data
    for key in ("n_target_small", "n_target_large", "n_source"):
        _check(getattr(d, key) >= 1, f"data.{key}", "must be at least 1")
    _check(d.behavior in ("uniform", "epsilon_greedy"), "data.behavior", "must be 'uniform' or 'epsilon_greedy'")
    _check(0.0 <= d.epsilon <= 1.0, "data.epsilon", "must lie in [0, 1]")
    a = cfg.augment
    _check(a.eta >= 0, "augment.eta", "must be non-negative")
    _check(a.dara_clamp >= 0, "augment.dara_clamp", "must be non-negative")
    _check(a.clip_lo > 0, "augment.clip_lo", "must be positive")
    _check(a.clip_hi >= a.clip_lo, "augment.clip_hi", "must be at least clip_lo")
    _check(a.sigma_floor >= 0, "augment.sigma_floor", "must be non-negative")
    _check(a.estimator in ("fitted_value", "trajectory_empirical"), "augment.estimator", "must be 'fitted_value' or 'trajectory_empirical'")
    _check(a.n_action_samples >= 1, "augment.n_action_samples", "must be at least 1")
    _check(a.temperature > 0, "augment.temperature", "must be positive")
    _check(a.value_target in ("behavior", "optimal"), "augment.value_target", "must be 'behavior' or 'optimal'")
    c = cfg.classifier
    _check(c.lr > 0, "classifier.lr", "must be positive")
    _check(c.epochs >= 1, "classifier.epochs", "must be at least 1")
    _check(c.batch >= 1, "classifier.batch", "must be at least 1")
    _check(c.l2 >= 0, "classifier.l2", "must be non-negative")
    lr = cfg.learner
    _check(lr.kind in ("tabular", "neural"), "learner.kind", "must be 'tabular' or 'neural'")
    _check(lr.bin_width > 0, "learner.bin_width", "must be positive")
    _check(lr.smoothing >= 0, "learner.smoothing", "must be non-negative")
    _check(lr.width >= 1, "learner.width", "must be at least 1")
    _check(lr.lr > 0, "learner.lr", "must be positive")
    _check(lr.epochs >= 1, "learner.epochs", "must be at least 1")
    _check(lr.batch >= 1, "learner.batch", "must be at least 1")
    e = cfg.eval
    _check(all(isinstance(f, (int, float)) and not isinstance(f, bool) for f in e.f_grid), "eval.f_grid", "must be a list of numbers")
    _check(e.n_rollouts >= 1, "eval.n_rollouts", "must be at least 1")
    _check(len(e.methods) >= 1, "eval.methods", "need at least one method")
    for m in e.methods:
        _check(m in ALL_METHODS, "eval.methods", f"unknown method {m!r}, choose from {list(ALL_METHODS)}")
    r = cfg.rate_study
    grid = r.n_grid
    _check(len(grid) >= 3, "rate_study.n_grid", "need at least three sample sizes")
    _check(all(isinstance(n, int) and n >= 2 for n in grid), "rate_study.n_grid", "sizes must be integers >= 2")
    _check(all(b > a for a, b in zip(grid, grid[1:])), "rate_study.n_grid", "must be strictly increasing")
    _check(0.0 < r.target_fraction < 1.0, "rate_study.target_fraction", "must lie in (0, 1)")
    return cfg


def from_dict(doc: dict) -> ExperimentConfig:
    values = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "expected a table")
            values[key] = _section(key, _SECTIONS[key], value)
        elif key in _TOP_KEYS:
            default = getattr(ExperimentConfig(), key)
            if key == "seeds" and isinstance(value, int) and not isinstance(value, bool):
                if value < 1:
                    raise ConfigError("seeds", "seed count must be at least 1")
                value = list(range(value))
            values[key] = _coerce(key, value, default)
        else:
            raise ConfigError(key, "unknown key")
    if "eval" in values:
        grid = values["eval"].f_grid
        if all(isinstance(f, (int, float)) and not isinstance(f, bool) for f in grid):
            values["eval"] = replace(values["eval"], f_grid=tuple(float(f) for f in grid))
    return validate(ExperimentConfig(**values))


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    """Read and validate a config file. ``RADT_LAB_SEED`` overrides ``root_seed``."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"malformed TOML: {exc}") from None
    cfg = from_dict(doc)
    env = os.environ if env is None else env
    if env.get(SEED_ENV_VAR):
        try:
            seed = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(SEED_ENV_VAR, "must be an integer") from None
        cfg = validate(replace(cfg, root_seed=seed))
    return cfg


def override(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    """Return a copy with ``section.key`` (or a top-level key) set to ``value``, revalidated."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(key, "unknown section")
        current = getattr(cfg, section)
        if name not in {f.name for f in fields(current)}:
            raise ConfigError(key, "unknown key")
        value = _coerce(key, value, getattr(current, name))
        return validate(replace(cfg, **{section: replace(current, **{name: value})}))
    if key not in _TOP_KEYS:
        raise ConfigError(key, "unknown key")
    return validate(replace(cfg, **{key: _coerce(key, value, getattr(cfg, key))}))
