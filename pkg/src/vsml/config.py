"""Experiment configuration: one JSON document, validated in full before any compute."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .cloning import CloneConfig
from .core import STATE_CLIP, ConfigError, Dims, LayerSpec
from .es import EsConfig, TaskDistribution, VsmlLearner
from .tasks import TaskError, TaskSpec

MODES = ("meta-train", "meta-test", "clone", "run-cloned", "verify-equivalence", "grad-check", "introspect")
LEARNERS = ("vsml", "meta-rnn", "sgd", "adam")
PROTOCOLS = ("repeated-pairs", "full-stream")


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class Architecture:
    N: int = 16
    Nf: int = 8
    Nb: int = 8
    hidden: tuple = ()
    ticks_per_example: int = 2
    read_tick: int = 0
    clip: float | None = None
    init_scale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.init_scale > 0:
            raise ConfigError("architecture.init_scale must be > 0")
        Dims(self.N, self.Nf, self.Nb)
        LayerSpec.chain(1, 1, self.hidden, self.ticks_per_example, self.read_tick)

    @property
    def dims(self) -> Dims:
        return Dims(self.N, self.Nf, self.Nb)

    def learner(self, init_seed: int = 0) -> VsmlLearner:
        return VsmlLearner(self.dims, self.hidden, self.ticks_per_example, self.read_tick, self.clip,
                           init_seed=init_seed, init_scale=self.init_scale)

    @classmethod
    def from_dict(cls, d) -> "Architecture":
        _reject_unknown(d, cls.__dataclass_fields__, "architecture")
        return cls(**d)


@dataclass
class MetaTestConfig:
    episodes: int = 5
    length: int | None = None
    hidden: tuple = ()          # SGD/Adam network hidden sizes
    lr: float | None = None
    clip: float | None = None

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.episodes < 1:
            raise ConfigError("meta_test.episodes must be positive")


@dataclass
class ClonedRunConfig:
    batch: int = 64
    steps: int = 500
    hidden: tuple = ()
    clip: float | None = STATE_CLIP
    init_scale: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.batch < 1 or self.steps < 1:
            raise ConfigError("run_cloned.batch and run_cloned.steps must be positive")


@dataclass
class IntrospectConfig:
    protocol: str = "repeated-pairs"
    length: int = 50

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"introspect.protocol must be one of {PROTOCOLS}")


@dataclass
class ExperimentConfig:
    mode: str
    architecture: Architecture = field(default_factory=Architecture)
    es: EsConfig = field(default_factory=EsConfig)
    cloning: CloneConfig = field(default_factory=CloneConfig)
    tasks: list = field(default_factory=lambda: [TaskSpec()])
    task_weights: list | None = None
    meta_test: MetaTestConfig = field(default_factory=MetaTestConfig)
    run_cloned: ClonedRunConfig = field(default_factory=ClonedRunConfig)
    introspect: IntrospectConfig = field(default_factory=IntrospectConfig)
    learner: str = "vsml"
    seed: int = 0
    equivalence: dict = field(default_factory=lambda: {"trials": 100, "max_dim": 3, "sizes": [1, 2, 4]})
    grad_check: dict = field(default_factory=lambda: {"instances": 20, "tolerance": 1e-4})

    SECTIONS = {"architecture": Architecture, "meta_test": MetaTestConfig, "run_cloned": ClonedRunConfig,
                "introspect": IntrospectConfig}

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learner not in LEARNERS:
            raise ConfigError(f"learner must be one of {LEARNERS}, got {self.learner!r}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        TaskDistribution(self.tasks, self.task_weights)
        _reject_unknown(self.equivalence, ("trials", "max_dim", "sizes", "tolerance"), "equivalence")
        _reject_unknown(self.grad_check, ("instances", "tolerance", "seed"), "grad_check")

    def distribution(self, data_root=None) -> TaskDistribution:
        return TaskDistribution(self.tasks, self.task_weights, data_root)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _reject_unknown(d, cls.__dataclass_fields__, "config")
        if "mode" not in d:
            raise ConfigError("config needs a mode")
        kw = dict(d)
        for key, typ in cls.SECTIONS.items():
            if key in kw:
                if typ is Architecture:
                    kw[key] = Architecture.from_dict(kw[key])
                else:
                    _reject_unknown(kw[key], typ.__dataclass_fields__, key)
                    kw[key] = typ(**kw[key])
        if "es" in kw:
            kw["es"] = EsConfig.from_dict(kw["es"])
        if "cloning" in kw:
            kw["cloning"] = CloneConfig.from_dict(kw["cloning"])
        if "tasks" in kw:
            try:
                kw["tasks"] = [TaskSpec.from_dict(t) for t in kw["tasks"]]
            except TaskError as exc:
                raise ConfigError(str(exc)) from exc
            except TypeError as exc:
                raise ConfigError(f"bad task entry: {exc}") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)
