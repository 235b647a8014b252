"""Learning-rate schedules.

``cosine_warmup`` ramps linearly from ``warmup_init_lr`` to ``max_lr`` over
``warmup_steps`` and then follows a half cosine down to ``min_lr`` at the last
step. ``multi_step`` shares the warmup ramp and afterwards multiplies
``max_lr`` by ``gamma`` once for every milestone epoch already reached.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Tuple

from mtclip.errors import ArgumentError, ConfigError

SCHEDULE_KINDS = ("cosine_warmup", "multi_step")


@dataclasses.dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine_warmup"
    warmup_steps: int = 1000
    warmup_init_lr: float = 1e-6
    max_lr: float = 3e-5
    min_lr: float = 1e-6
    milestones: Tuple[int, ...] = (22, 24)
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def validate(self) -> "ScheduleConfig":
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if self.warmup_init_lr > self.max_lr:
            raise ConfigError("warmup_init_lr must not exceed max_lr")
        if self.min_lr > self.max_lr:
            raise ConfigError("min_lr must not exceed max_lr")
        if min(self.warmup_init_lr, self.min_lr) < 0:
            raise ConfigError("learning rates must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        return self


def lr_at_step(schedule: ScheduleConfig, step: int, total_steps: int,
               steps_per_epoch: Optional[int] = None) -> float:
    """Learning rate for optimizer step ``step`` (0-based) of ``total_steps``.

    ``steps_per_epoch`` converts milestone epochs to steps for ``multi_step``.
    """
    if step < 0 or step > total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps}]")
    s = schedule
    if step < s.warmup_steps:
        return s.warmup_init_lr + (s.max_lr - s.warmup_init_lr) * step / s.warmup_steps
    if s.kind == "multi_step":
        if not steps_per_epoch or steps_per_epoch < 1:
            raise ArgumentError("multi_step schedule needs steps_per_epoch >= 1")
        epoch = step // steps_per_epoch
        passed = sum(1 for m in s.milestones if epoch >= m)
        return s.max_lr * s.gamma ** passed
    span = total_steps - s.warmup_steps
    if span <= 0:
        return s.max_lr
    progress = (step - s.warmup_steps) / span
    return s.min_lr + 0.5 * (s.max_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))
