"""Run configuration and per-step metric records.

A run is fully described by a RunConfig; the same config and seed must
reproduce the same metric stream byte for byte. Config dictionaries are
validated strictly: an unknown key is an error, not a warning, so a typo in
an experiment file cannot silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .pcset import PolicyConfig

LOSS_FORMS = ("vc-ce", "vc-mse", "neg", "cosine", "baseline-keep", "baseline-discard")
WEIGHT_GENS = ("normalized", "attention")
TASKS = ("grid-seg", "scene-det")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    """Confidence bands and the unlabelled-loss weight."""

    t: float = 0.95
    t_low: float = 0.6
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.t <= 1.0:
            raise ConfigError("t must lie in (0, 1]")
        if not 0.0 <= self.t_low < self.t:
            raise ConfigError("t_low must lie in [0, t)")
        if self.beta < 0.0:
            raise ConfigError("beta must be non-negative")


@dataclass(frozen=True)
class EmaConfig:
    momentum: float = 0.9996

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("ema momentum must lie in [0, 1)")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError("learning rate must be positive")
        if self.weight_decay < 0.0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("bad optimizer settings")


@dataclass(frozen=True)
class RunConfig:
    task: str = "grid-seg"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    loss_form: str = "vc-ce"
    weight_gen: str = "normalized"
    thresholds: Thresholds = field(default_factory=Thresholds)
    ema: EmaConfig = field(default_factory=EmaConfig)
    bn_momentum: float = 0.9
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    iterations: int = 300
    seed: int = 0
    out_dir: str | None = None
    focal_gamma: float | None = None
    magnitude: object = "min-weight-norm"
    t_loc: float = 0.05
    gen_lr: float = 0.01
    eval_every: int = 50
    batch_labelled: int = 32
    batch_unlabelled: int = 32
    hidden_width: int = 32
    task_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"unknown loss form {self.loss_form!r}")
        if self.weight_gen not in WEIGHT_GENS:
            raise ConfigError(f"unknown weight generator {self.weight_gen!r}")
        if self.task == "grid-seg":
            if self.policy.policy not in ("top2", "mutual"):
                raise ConfigError("grid-seg supports the top2 and mutual policies")
            active = {"mutual": ("trusted", "both"), "top2": ("retained", "both")}
            if self.policy.applies_to not in active[self.policy.policy]:
                raise ConfigError(
                    f"policy {self.policy.policy!r} is inactive on band "
                    f"{self.policy.applies_to!r}; no unit would ever be routed to it")
        if self.task == "scene-det" and self.policy.policy not in ("temporal", "cross"):
            raise ConfigError("scene-det supports the temporal and cross policies")
        if self.iterations < 0 or self.eval_every < 1:
            raise ConfigError("bad iteration settings")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError("bn momentum must lie in (0, 1]")
        if self.magnitude != "min-weight-norm" and float(self.magnitude) <= 0.0:
            raise ConfigError("magnitude must be 'min-weight-norm' or a positive constant")
        if self.focal_gamma is not None and self.focal_gamma < 0.0:
            raise ConfigError("focal_gamma must be non-negative")
        if self.t_loc <= 0.0:
            raise ConfigError("t_loc must be positive")
        if self.batch_labelled < 1 or self.batch_unlabelled < 0:
            raise ConfigError("bad batch sizes")


def default_config(task: str = "grid-seg") -> RunConfig:
    """Task defaults: the detection recipe differs from the segmentation one."""
    if task == "grid-seg":
        return RunConfig()
    if task == "scene-det":
        return RunConfig(
            task="scene-det",
            policy=PolicyConfig(policy="temporal"),
            thresholds=Thresholds(t=0.7, t_low=0.0, beta=4.0),
            optimizer=OptimizerConfig(lr=0.01, weight_decay=0.02, momentum=0.9),
            focal_gamma=2.0,
            magnitude=3.5,
        )
    raise ConfigError(f"unknown task {task!r}")


_NESTED = {"policy": PolicyConfig, "thresholds": Thresholds, "ema": EmaConfig,
           "optimizer": OptimizerConfig}


def _build_nested(cls, current, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} section must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dataclasses.replace(current, **data)


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a plain dict, starting at the task's defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    task = data.pop("task", "grid-seg")
    base = default_config(task)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    updates = {}
    for key, value in data.items():
        if key in _NESTED:
            updates[key] = _build_nested(_NESTED[key], getattr(base, key), value)
        else:
            updates[key] = value
    return dataclasses.replace(base, **updates)


def config_to_dict(config: RunConfig) -> dict:
    out = dataclasses.asdict(config)
    return out


@dataclass
class StepMetrics:
    """One training step's reported numbers; eval_metric only on eval steps."""

    iteration: int
    loss_labelled: float
    loss_vc: float
    confusing_ratio: float
    pseudo_accuracy: float
    eval_metric: float | None = None
    contributing_units: int = 0

    CSV_HEADER = "iter,loss_l,loss_vc,confusing_ratio,pseudo_acc,eval_metric"

    def csv_row(self) -> str:
        ev = "" if self.eval_metric is None else repr(float(self.eval_metric))
        return ",".join([str(self.iteration), repr(float(self.loss_labelled)),
                         repr(float(self.loss_vc)), repr(float(self.confusing_ratio)),
                         repr(float(self.pseudo_accuracy)), ev])
