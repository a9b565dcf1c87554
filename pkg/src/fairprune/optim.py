"""Primal SGD with momentum, milestone learning-rate decay and dual ascent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .formulations import DualState, Formulation, ViolationVector, project_duals


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 1e-4

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.nesterov and self.momentum == 0:
            raise ValueError("nesterov needs a positive momentum")


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.01
    milestones: tuple[float, ...] = (0.6, 0.8, 0.9)
    gamma: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if any(not 0.0 <= m <= 1.0 for m in self.milestones):
            raise ValueError("milestones are fractions of the total epochs")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class DualConfig:
    lr: float = 0.01

    def __post_init__(self) -> None:
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError("dual step size must be finite and positive")


def milestone_epochs(schedule: LrSchedule, total_epochs: int) -> list[int]:
    # guard against 0.29 * 100 == 28.999999999999996
    return [int(math.floor(m * total_epochs + 1e-9)) for m in schedule.milestones]


def lr_at_epoch(schedule: LrSchedule, epoch: int, total_epochs: int) -> float:
    passed = sum(1 for m in milestone_epochs(schedule, total_epochs) if m <= epoch)
    return schedule.base_lr * schedule.gamma ** passed


@dataclass
class MomentumState:
    buffers: list[np.ndarray | None] = field(default_factory=list)


def sgd_step(params: Sequence, masks: Sequence[np.ndarray | None], state: MomentumState,
             cfg: SgdConfig, lr: float) -> None:
    """One heavy-ball (or Nesterov) step; masked entries are re-zeroed after."""
    if not state.buffers:
        state.buffers = [None] * len(params)
    if len(state.buffers) != len(params) or len(masks) != len(params):
        raise ValueError("params, masks and momentum buffers differ in length")
    beta = cfg.momentum
    for i, (p, mask) in enumerate(zip(params, masks)):
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.values.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.values
        if beta:
            m = state.buffers[i]
            if m is None:
                m = np.zeros_like(p.values)
            m = beta * m + g
            state.buffers[i] = m
            update = g + beta * m if cfg.nesterov else m
        else:
            update = g
        new = p.values - lr * update
        if mask is not None:
            new = new * mask
        p.values = new


def dual_ascent_step(dual: DualState, viol: ViolationVector, cfg: DualConfig,
                     form: Formulation) -> None:
    c = viol.values
    if c.shape != dual.multipliers.shape:
        raise ValueError(f"violations {c.shape} do not match multipliers {dual.multipliers.shape}")
    dual.multipliers = project_duals(form, dual.multipliers + cfg.lr * c)
