"""Training configuration shared by pretraining and probing."""

from __future__ import annotations

import dataclasses
from typing import Tuple

from mtclip import config as cfgio
from mtclip.errors import ConfigError
from mtclip.losses import LossWeights
from mtclip.models import TASKS
from mtclip.trainer.optim import OptimizerConfig
from mtclip.trainer.schedule import ScheduleConfig

PROBE_TASKS = ("segmentation", "depth", "surface_normal", "classification")
PROBE_HEADS = ("linear", "psp")


@dataclasses.dataclass(frozen=True)
class ProbeSettings:
    task: str = "segmentation"
    head: str = "linear"


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 30
    batch_size: int = 32
    schedule: ScheduleConfig = ScheduleConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    weights: LossWeights = LossWeights()
    enabled_experts: Tuple[str, ...] = TASKS
    probe: ProbeSettings = ProbeSettings()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "enabled_experts", tuple(self.enabled_experts))

    def validate(self) -> "TrainConfig":
        if self.phase not in ("pretrain", "probe"):
            raise ConfigError(f"phase must be 'pretrain' or 'probe', got {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        unknown = [t for t in self.enabled_experts if t not in TASKS]
        if unknown:
            raise ConfigError(f"enabled_experts contains unknown task(s) {unknown}; choose from {TASKS}")
        unknown = [t for t in self.weights.lambda_task if t not in TASKS]
        if unknown:
            raise ConfigError(f"weights.lambda_task has unknown task(s) {unknown}")
        if self.probe.task not in PROBE_TASKS:
            raise ConfigError(f"probe.task must be one of {PROBE_TASKS}, got {self.probe.task!r}")
        if self.probe.head not in PROBE_HEADS:
            raise ConfigError(f"probe.head must be one of {PROBE_HEADS}, got {self.probe.head!r}")
        if self.probe.task == "classification" and self.probe.head != "linear":
            raise ConfigError("the classification probe only supports head=linear")
        self.schedule.validate()
        self.optimizer.validate()
        return self

    def effective_weights(self) -> LossWeights:
        """Task weights restricted to the enabled experts (others forced to 0)."""
        lam = {t: (w if t in self.enabled_experts else 0.0) for t, w in self.weights.lambda_task.items()}
        return LossWeights(self.weights.lambda_clip, lam)

    def digest(self) -> bytes:
        return cfgio.digest(self)


# Per-task probe defaults. These rates suit heads on a well-trained encoder;
# the desk-scale experiments scale them with ``lr_multiplier`` (see README).
PROBE_DEFAULTS = {
    "segmentation": dict(epochs=50, batch_size=32, warmup_steps=500, warmup_init_lr=1e-6, max_lr=3e-5, min_lr=3e-6),
    "depth": dict(epochs=50, batch_size=16, warmup_steps=1000, warmup_init_lr=1e-6, max_lr=1e-4, min_lr=1e-6),
    "surface_normal": dict(epochs=50, batch_size=16, warmup_steps=1000, warmup_init_lr=1e-6, max_lr=1e-5, min_lr=1e-6),
    "classification": dict(epochs=40, batch_size=128, warmup_steps=1000, warmup_init_lr=1e-6, max_lr=3e-5, min_lr=1e-6),
}


def probe_config(task: str, head: str = "linear", seed: int = 0, lr_multiplier: float = 1.0,
                 epochs: int | None = None, train_size: int | None = None) -> TrainConfig:
    """Probe TrainConfig with the per-task recipe, optionally rescaling LRs and epochs.

    With ``train_size`` the warmup is capped at a tenth of the run so small
    probe sets still reach ``max_lr``.
    """
    if task not in PROBE_DEFAULTS:
        raise ConfigError(f"unknown probe task {task!r}")
    d = PROBE_DEFAULTS[task]
    epochs = epochs or d["epochs"]
    warmup = d["warmup_steps"]
    if train_size is not None:
        total = epochs * -(-train_size // d["batch_size"])
        warmup = min(warmup, max(1, total // 10))
    sched = ScheduleConfig(
        kind="cosine_warmup",
        warmup_steps=warmup,
        warmup_init_lr=d["warmup_init_lr"],
        max_lr=d["max_lr"] * lr_multiplier,
        min_lr=d["min_lr"] * lr_multiplier,
    )
    return TrainConfig(phase="probe", epochs=epochs, batch_size=d["batch_size"], schedule=sched,
                       enabled_experts=(), probe=ProbeSettings(task, head), seed=seed).validate()
