"""Gradual magnitude pruning with a cubic sparsity schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


class MonotonicityError(ValueError):
    """A pruning target would un-prune weights."""


@dataclass(frozen=True)
class GmpSchedule:
    initial_sparsity: float = 0.0
    final_sparsity: float = 0.9
    start_epoch: int = 0
    end_epoch: int = 14
    frequency: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.initial_sparsity < 1.0:
            raise ScheduleError("initial_sparsity must lie in [0, 1)")
        if not 0.0 < self.final_sparsity < 1.0:
            raise ScheduleError("final_sparsity must lie in (0, 1)")
        if self.final_sparsity < self.initial_sparsity:
            raise ScheduleError("final_sparsity must be >= initial_sparsity")
        if self.end_epoch < self.start_epoch or self.start_epoch < 0:
            raise ScheduleError("need 0 <= start_epoch <= end_epoch")
        if self.frequency < 1:
            raise ScheduleError("frequency must be >= 1")
        if (self.end_epoch - self.start_epoch) % self.frequency:
            raise ScheduleError("end_epoch must be reachable from start_epoch in steps of frequency")

    def is_pruning_epoch(self, epoch: int) -> bool:
        return (self.start_epoch <= epoch <= self.end_epoch
                and (epoch - self.start_epoch) % self.frequency == 0)

    def pruning_epochs(self) -> list[int]:
        return list(range(self.start_epoch, self.end_epoch + 1, self.frequency))


def sparsity_at_epoch(sched: GmpSchedule, epoch: int) -> float:
    """Target sparsity ``s_f + (s_i - s_f) * (1 - elapsed)**3``.

    ``elapsed`` is the fraction of the pruning span ``[start, end]`` covered by
    ``epoch``; a zero-length span prunes straight to the final sparsity.
    """
    if not sched.is_pruning_epoch(epoch):
        raise ScheduleError(f"epoch {epoch} is not a pruning epoch of {sched}")
    span = sched.end_epoch - sched.start_epoch
    if span == 0 or epoch == sched.end_epoch:
        return sched.final_sparsity
    if epoch == sched.start_epoch:
        return sched.initial_sparsity
    remaining = 1.0 - (epoch - sched.start_epoch) / span
    return sched.final_sparsity + (sched.initial_sparsity - sched.final_sparsity) * remaining ** 3


def pruned_count(target: float, numel: int) -> int:
    # round half away from zero (target and numel are nonnegative)
    return int(math.floor(target * numel + 0.5))


def magnitude_prune_layer(W, mask: np.ndarray, target: float) -> np.ndarray:
    """Mask the ``round(target * numel)`` smallest-magnitude effective weights.

    Already-masked entries sort first (they stay pruned); equal magnitudes are
    ordered by flat index.  Returns a new mask; the inputs are not modified.
    """
    w = W.values if hasattr(W, "values") else np.asarray(W)
    mask = np.asarray(mask, dtype=np.float64)
    if not 0.0 <= target <= 1.0:
        raise ValueError("target sparsity must lie in [0, 1]")
    numel = mask.size
    n_prune = pruned_count(target, numel)
    already = int(numel - mask.sum())
    if n_prune < already:
        raise MonotonicityError(
            f"target {target} prunes {n_prune} weights but {already} are already masked")
    flat_mask = mask.ravel()
    mag = np.abs(w.ravel() * flat_mask)
    # primary key: kept (masked first), secondary: magnitude, tertiary: index
    order = np.lexsort((np.arange(numel), mag, flat_mask))
    new = np.ones(numel)
    new[order[:n_prune]] = 0.0
    return new.reshape(mask.shape)


def apply_gmp_step(model, sched: GmpSchedule, epoch: int) -> float:
    """Prune every prunable layer to the scheduled sparsity; returns the target."""
    target = sparsity_at_epoch(sched, epoch)
    for layer in model.layers:
        if not layer.prunable:
            continue
        layer.mask = magnitude_prune_layer(layer.weight, layer.mask, target)
        layer.weight.values = layer.weight.values * layer.mask
    return target
