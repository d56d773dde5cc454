"""Structured-text run configuration: parse, validate, reject.

Every section maps onto one dataclass; unknown keys and out-of-range values
abort with the dotted field path before any computation starts.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .datasets import REMOVAL_MODES, SyntheticSpec
from .experiments import STABILITY_SOURCES, EvaluatorSuite
from .nn import TrainConfig
from .objectives import KINDS, ObjectiveConfig
from .profiler import MEASURES

CONFIG_ENV = "ADVQUALITY_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    test_fraction: float = 1 / 6
    split_seed: int = 0


@dataclass
class ObjectiveSection:
    kind: str = "pgd_at"
    lam: float = 6.0
    gairat_lambda: float = 0.0


@dataclass
class EvalSection:
    attack: AttackConfig = field(default_factory=AttackConfig)
    evaluators: EvaluatorSuite = field(default_factory=EvaluatorSuite)
    min_perturbation_step: float = 1 / 255
    min_perturbation_max: float = 32 / 255


@dataclass
class ExperimentSection:
    fractions: list = field(default_factory=lambda: [0.0, 0.2, 0.3, 0.6])
    modes: list = field(default_factory=lambda: list(REMOVAL_MODES))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    profile_seeds: list = field(default_factory=lambda: [0, 1])
    half_split_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    overestimation_objectives: list = field(default_factory=lambda: ["pgd_at", "gairat"])
    surrogate_seed: int = 1000
    measure: str = "stability"
    stability_source: str = "fresh"
    classwise_removal: bool = False
    permutation_shuffles: int = 1000


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class CliConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output: OutputSection = field(default_factory=OutputSection)

    def objective_config(self, kind: str | None = None) -> ObjectiveConfig:
        o = self.objective
        return ObjectiveConfig(kind or o.kind, o.lam, o.gairat_lambda, self.attack)

    def validate(self) -> "CliConfig":
        _wrap(self.data.synthetic.validate, "data.synthetic")
        if not 0 < self.data.test_fraction < 1:
            raise ConfigError("data.test_fraction: must lie in (0, 1)")
        _wrap(self.train.validate, "train")
        _wrap(self.attack.validate, "attack")
        _wrap(self.objective_config().validate, "objective")
        _wrap(self.eval.attack.validate, "eval.attack")
        ev = self.eval.evaluators
        for name in ("long_iterations", "restarts", "square_queries"):
            if getattr(ev, name) < 1:
                raise ConfigError(f"eval.evaluators.{name}: must be a positive integer")
        if not 0 < ev.square_p_init <= 1:
            raise ConfigError("eval.evaluators.square_p_init: must lie in (0, 1]")
        if not 0 < self.eval.min_perturbation_step <= self.eval.min_perturbation_max <= 1:
            raise ConfigError("eval.min_perturbation_step: need 0 < step <= min_perturbation_max <= 1")
        ex = self.experiment
        fr = ex.fractions
        if any(not 0 <= f < 1 for f in fr):
            raise ConfigError("experiment.fractions: each fraction must lie in [0, 1)")
        if any(b < a for a, b in zip(fr, fr[1:])):
            raise ConfigError("experiment.fractions: must be sorted ascending")
        for m in ex.modes:
            if m not in REMOVAL_MODES:
                raise ConfigError(f"experiment.modes: unknown mode {m!r}")
        for k in ex.overestimation_objectives:
            if k not in KINDS:
                raise ConfigError(f"experiment.overestimation_objectives: unknown objective {k!r}")
        for name in ("seeds", "profile_seeds", "half_split_seeds"):
            seeds = getattr(ex, name)
            if any(s < 0 for s in seeds):
                raise ConfigError(f"experiment.{name}: seeds must be nonnegative")
            if len(set(seeds)) != len(seeds):
                raise ConfigError(f"experiment.{name}: duplicate seeds")
        if len(ex.profile_seeds) < 1:
            raise ConfigError("experiment.profile_seeds: need at least one profiling run")
        if ex.measure not in MEASURES:
            raise ConfigError(f"experiment.measure: must be one of {', '.join(MEASURES)}")
        if ex.stability_source not in STABILITY_SOURCES:
            raise ConfigError(f"experiment.stability_source: must be one of {', '.join(STABILITY_SOURCES)}")
        if ex.permutation_shuffles < 1:
            raise ConfigError("experiment.permutation_shuffles: must be a positive integer")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


def _wrap(fn, prefix):
    try:
        fn(prefix)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _coerce(value, tp, path):
    """Check ``value`` against the annotation ``tp``; returns the converted value."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        rest = [a for a in args if a is not type(None)]
        return _coerce(value, rest[0], path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float, str, list)):
                raise ConfigError(f"{path}[{i}]: unsupported value {v!r}")
        return list(value)
    return value


def _build(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"{where}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in raw:
            where = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], where)
    return cls(**kwargs)


def parse_config(raw: dict | None) -> CliConfig:
    return _build(CliConfig, raw or {}, "").validate()


def load_config(path=None) -> CliConfig:
    """Read a YAML config; ``None`` falls back to the environment default,
    then to built-in defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return parse_config({})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed config: {exc}") from None
    return parse_config(raw)


def published_config_path(name: str = "desk") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.yaml"
