"""YAML run configuration.

Every section maps onto one frozen dataclass; any key the dataclass does not
define is an error, and omitted keys keep their defaults. ``effective_yaml``
renders the fully defaulted config, which is what run directories store.

Layout::

    seed: 0
    output_dir: runs
    training_scenario: {...}   # TrainingConfig
    stochastic_scenario: {...} # StochasticTestConfig
    env: {...}                 # EnvSettings without idm
    idm: {...}                 # IdmParams
    mobil: {...}               # MobilParams
    train: {...}               # TrainConfig without seed
    eval: {...}                # EvalSettings
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import yaml

from lanebench.drl import TrainConfig
from lanebench.env import EnvSettings
from lanebench.mobil import MobilParams
from lanebench.scenarios import StochasticTestConfig, TrainingConfig
from lanebench.sim import IdmParams

SUITES = ("deterministic", "stochastic")
RULE_MASK_MODES = ("auto", "on", "off")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    """``policy`` is ``mobil`` or a checkpoint path; ``base_seed`` None means the run seed."""

    suite: str = "deterministic"
    policy: str = "mobil"
    episodes: int = 250
    base_seed: Optional[int] = None
    rule_mask: str = "auto"

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ValueError(f"eval.suite must be one of {SUITES}")
        if self.rule_mask not in RULE_MASK_MODES:
            raise ValueError(f"eval.rule_mask must be one of {RULE_MASK_MODES}")
        if self.episodes < 1:
            raise ValueError("eval.episodes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    training_scenario: TrainingConfig = field(default_factory=TrainingConfig)
    stochastic_scenario: StochasticTestConfig = field(default_factory=StochasticTestConfig)
    env: EnvSettings = field(default_factory=EnvSettings)
    mobil: MobilParams = field(default_factory=MobilParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def idm(self) -> IdmParams:
        return self.env.idm

    @property
    def eval_base_seed(self) -> int:
        return self.seed if self.eval.base_seed is None else self.eval.base_seed


# sections whose dataclass field is owned elsewhere in the file
_EXCLUDED = {"env": {"idm"}, "train": {"seed"}}


def _coerce(value, hint):
    origin = typing.get_origin(hint)
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, data: Any, section: str, **fixed):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"section '{section}' must be a mapping")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    allowed -= _EXCLUDED.get(section, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints.get(k)) for k, v in data.items()}
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from None


def config_from_dict(data: Optional[Mapping]) -> RunConfig:
    data = dict(data or {})
    sections = {"training_scenario", "stochastic_scenario", "env", "idm", "mobil", "train", "eval"}
    unknown = sorted(set(data) - sections - {"seed", "output_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    idm = _build(IdmParams, data.get("idm"), "idm")
    return RunConfig(
        seed=seed,
        output_dir=str(data.get("output_dir", "runs")),
        training_scenario=_build(TrainingConfig, data.get("training_scenario"), "training_scenario"),
        stochastic_scenario=_build(StochasticTestConfig, data.get("stochastic_scenario"),
                                   "stochastic_scenario"),
        env=_build(EnvSettings, data.get("env"), "env", idm=idm),
        mobil=_build(MobilParams, data.get("mobil"), "mobil"),
        train=_build(TrainConfig, data.get("train"), "train", seed=seed),
        eval=_build(EvalSettings, data.get("eval"), "eval"),
    )


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(data)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, seed=seed, train=dataclasses.replace(cfg.train, seed=seed))


def _plain(obj, drop=()):
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in drop or f.name.startswith("_"):
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "training_scenario": _plain(cfg.training_scenario),
        "stochastic_scenario": _plain(cfg.stochastic_scenario),
        "env": _plain(cfg.env, drop=("idm",)),
        "idm": _plain(cfg.idm),
        "mobil": _plain(cfg.mobil),
        "train": _plain(cfg.train, drop=("seed",)),
        "eval": _plain(cfg.eval),
    }


def effective_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=False)
