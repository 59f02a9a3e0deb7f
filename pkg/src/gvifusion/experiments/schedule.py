"""Cosine-annealed learning rate with warm restarts, and patience-based early stopping."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 0.01
    weight_decay: float = 5e-4
    min_lr: float = 1e-4
    max_lr: float = 0.01
    cycle_length: int = 10
    patience: int = 10

    def __post_init__(self):
        if not 0 < self.min_lr < self.max_lr:
            raise ValueError(f"need 0 < min_lr < max_lr, got {self.min_lr}, {self.max_lr}")
        if self.cycle_length < 1 or self.patience < 1:
            raise ValueError("cycle_length and patience must be >= 1")


def cosine_lr(step: int, schedule: TrainSchedule = TrainSchedule()) -> float:
    """Learning rate at epoch ``step``: max at the start of every cycle, cosine down to min."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    phase = (step % schedule.cycle_length) / schedule.cycle_length
    span = schedule.max_lr - schedule.min_lr
    return schedule.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * phase))


def early_stop(loss_history, patience: int = 10) -> bool:
    """True when none of the last ``patience`` losses beat the best loss seen before them."""
    history = list(loss_history)
    if not history:
        raise ValueError("empty loss history")
    if len(history) <= patience:
        return False
    best_before = min(history[:-patience])
    return min(history[-patience:]) >= best_before
