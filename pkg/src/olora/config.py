"""Run configuration: everything needed to replay an experiment from a seed."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from olora.errors import ConfigError
from olora.model import BlockConfig

log = logging.getLogger(__name__)

METHODS = ("seq_ft", "seq_lora", "lwf", "o_lora", "o_adalora", "multi", "mono")
ADAPTER_METHODS = ("seq_lora", "o_lora", "o_adalora", "multi", "mono")
# methods whose adapters go through rank allocation
ADAPTIVE_METHODS = ("o_adalora", "multi", "mono")
FULL_FT_METHODS = ("seq_ft", "lwf")


@dataclass(frozen=True)
class TaskSuiteConfig:
    n_tasks: int = 3
    seq_len: int = 4
    n_train_first: int = 2048
    n_train: int = 512
    n_eval: int = 256
    # per-task input subspace carrying the label-relevant variation
    subspace_dim: int = 4
    subspace_std: float = 1.0
    iso_std: float = 0.1
    mean_norm: float = 4.0
    teacher_hidden: int = 16

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ConfigError("n_tasks must be >= 1")
        if self.n_train_first < 4 * self.n_train:
            raise ConfigError("the first task needs at least 4x the samples of later tasks")


@dataclass(frozen=True)
class RunConfig:
    methods: tuple[str, ...] = ("o_lora",)
    model: BlockConfig = field(default_factory=BlockConfig)
    tasks: TaskSuiteConfig = field(default_factory=TaskSuiteConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    rank: int = 32
    rank_init: int = 12
    rank_target: int = 8
    lambda1: float = 0.5
    lambda2: float = 0.5
    lr_first: float = 1e-3
    lr_later: float = 1e-4
    lr_full_ft: float = 1e-5
    steps_first: int = 2000
    steps_later: int = 500
    batch_size: int = 16
    grad_accum: int = 1
    optimizer: str = "adam"
    momentum: float = 0.0
    lwf_weight: float = 1.0
    beta1: float = 0.85
    beta2: float = 0.85
    warmup_frac: float = 0.1
    decay_end_frac: float = 0.7
    log_every: int = 10
    out: str = "runs"

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"methods: unknown {bad}; choose from {list(METHODS)}")
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if self.rank_target > self.rank_init:
            raise ConfigError("rank_target: must not exceed rank_init")
        for name in ("rank", "rank_init", "rank_target", "steps_first", "steps_later",
                     "batch_size", "grad_accum", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("lambda1", "lambda2", "lwf_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        for name in ("lr_first", "lr_later", "lr_full_ft"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer: must be 'sgd' or 'adam'")
        if not 0 <= self.warmup_frac <= self.decay_end_frac <= 1:
            raise ConfigError("warmup_frac/decay_end_frac: need 0 <= warmup <= decay_end <= 1")

    def stage_steps(self, stage: int) -> int:
        return self.steps_first if stage == 0 else self.steps_later

    def stage_lr(self, method: str, stage: int) -> float:
        if method in FULL_FT_METHODS:
            return self.lr_full_ft
        if method == "mono":
            # every mono stage trains a fresh adapter from scratch
            return self.lr_first
        return self.lr_first if stage == 0 else self.lr_later

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["seeds"] = list(self.seeds)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = BlockConfig.from_dict(d["model"])
            if "tasks" in d:
                d["tasks"] = TaskSuiteConfig(**d["tasks"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def warn_unused(cfg: RunConfig, method: str) -> None:
    """Log when a hyperparameter was changed for a method that ignores it."""
    default = RunConfig()
    unused = {
        "seq_ft": ("lambda1", "lambda2", "rank", "rank_init", "rank_target", "lwf_weight"),
        "seq_lora": ("lambda1", "lambda2", "rank_init", "rank_target", "lwf_weight"),
        "lwf": ("lambda1", "lambda2", "rank", "rank_init", "rank_target"),
        "o_lora": ("lambda2", "rank_init", "rank_target", "lwf_weight"),
        "o_adalora": ("rank", "lwf_weight"),
        "multi": ("lambda1", "rank", "lwf_weight"),
        "mono": ("lambda1", "rank", "lwf_weight"),
    }[method]
    for name in unused:
        if getattr(cfg, name) != getattr(default, name):
            log.warning("%s ignores %s=%s", method, name, getattr(cfg, name))
