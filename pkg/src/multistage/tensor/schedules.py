"""Learning-rate schedules with optional linear warmup."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class LRSchedule:
    kind: str  # cosine | multistep | polynomial | constant
    base_lr: float
    total_steps: int
    lr_min: float = 0.0
    milestones: tuple[float, ...] = (0.7, 0.9)
    gamma: float = 0.1
    power: float = 0.9
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("cosine", "multistep", "polynomial", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")

    def __call__(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(sched: LRSchedule, step: int) -> float:
    """Learning rate at ``step``. Steps past ``total_steps`` clamp to the final value."""
    t = min(max(step, 0), sched.total_steps)
    if sched.warmup_steps and t < sched.warmup_steps:
        return sched.base_lr * t / sched.warmup_steps
    T = sched.total_steps
    lr0 = sched.base_lr
    if sched.kind == "constant":
        return lr0
    if sched.kind == "cosine":
        return sched.lr_min + 0.5 * (lr0 - sched.lr_min) * (1.0 + math.cos(math.pi * t / T))
    if sched.kind == "multistep":
        passed = sum(1 for m in sched.milestones if t >= m * T)
        return lr0 * sched.gamma ** passed
    return lr0 * (1.0 - t / T) ** sched.power


# the schedule each generalist branch kind follows
BRANCH_SCHEDULES = {"image_wise": "cosine", "patch_wise": "multistep", "pixel_wise": "polynomial"}
