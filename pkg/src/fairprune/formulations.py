"""Constrained fine-tuning formulations and their proxy-constraint pieces.

Every formulation supplies two things to the alternating solver:

* ``violations``: constraint values from non-differentiable estimates (replay
  buffers or the current batch), used by the dual player;
* ``group_coefficients`` / ``primal_weights``: the differentiable loss-gap
  surrogate seen by the primal player.  All surrogates reduce to
  ``sum_g mu_g * (L_g - L)`` on the batch, so the primal objective is a single
  weighted sum of per-sample losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, scale, weighted_sum
from .buffers import BufferSet, buffers_query_group_means, excess_gaps

NFT = "nft"
CEAG = "ceag"
EL = "el"
CELG = "celg"
PW = "pw"
TWO_SIDED = "two_sided"

KINDS = (NFT, CEAG, EL, CELG, PW, TWO_SIDED)
ACCURACY_BASED = (CEAG, PW, TWO_SIDED)
LOSS_BASED = (EL, CELG)


class FormulationError(ValueError):
    pass


@dataclass(frozen=True)
class Formulation:
    kind: str = NFT
    epsilon: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise FormulationError(f"unknown formulation {self.kind!r}; expected one of {KINDS}")
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise FormulationError("epsilon must be finite and >= 0")

    @property
    def equality(self) -> bool:
        return self.kind == EL

    @property
    def observation(self) -> str | None:
        """Which per-sample quantity the constraint estimator consumes."""
        if self.kind in ACCURACY_BASED:
            return "accuracy"
        if self.kind in LOSS_BASED:
            return "loss"
        return None


def dual_dim(form: Formulation, num_groups: int) -> int:
    return {NFT: 0, CEAG: num_groups, EL: num_groups, CELG: num_groups,
            PW: 1, TWO_SIDED: 2 * num_groups}[form.kind]


@dataclass
class DualState:
    multipliers: np.ndarray
    equality: bool = False

    @classmethod
    def zeros(cls, form: Formulation, num_groups: int) -> "DualState":
        return cls(np.zeros(dual_dim(form, num_groups)), form.equality)


@dataclass(frozen=True)
class GroupEstimate:
    """Per-group estimates of a sparse-model quantity.

    ``overall`` is None when the aggregate should be the unweighted mean of the
    valid groups (replay-buffer convention).
    """

    group: np.ndarray
    valid: np.ndarray
    overall: float | None = None


@dataclass(frozen=True)
class ViolationVector:
    values: np.ndarray
    psi: np.ndarray | None = None
    extremes: tuple[int, int] | None = None


def estimate_from_buffers(bufset: BufferSet) -> GroupEstimate:
    means, full = buffers_query_group_means(bufset)
    return GroupEstimate(means, full)


def estimate_from_batch(values: np.ndarray, group_index) -> GroupEstimate:
    G = len(group_index)
    group = np.zeros(G)
    valid = np.zeros(G, dtype=bool)
    for gid, idx in enumerate(group_index):
        if len(idx):
            group[gid] = values[idx].mean()
            valid[gid] = True
    return GroupEstimate(group, valid, float(values.mean()))


def violations(form: Formulation, estimate: GroupEstimate | None, baseline) -> ViolationVector:
    """Constraint values ``c`` for the dual ascent step.

    Accuracy-based kinds read ``estimate`` as sparse accuracies, loss-based
    kinds as sparse mean losses.  Groups without a valid estimate get 0.
    """
    if form.kind == NFT:
        return ViolationVector(np.zeros(0))
    if baseline is None:
        raise FormulationError("constraint violations need a dense baseline snapshot")
    if estimate is None:
        raise FormulationError(f"{form.kind} needs a constraint estimate")
    valid = estimate.valid
    eps = form.epsilon

    if form.kind in (CEAG, TWO_SIDED):
        psi = excess_gaps(estimate.group, valid, baseline.group_accuracy,
                          baseline.accuracy, estimate.overall)
        upper = np.where(valid, psi - eps, 0.0)
        if form.kind == CEAG:
            return ViolationVector(upper, psi)
        lower = np.where(valid, -psi - eps, 0.0)
        return ViolationVector(np.concatenate((upper, lower)), psi)

    if form.kind == PW:
        if not valid.any():
            return ViolationVector(np.zeros(1))
        gaps = np.where(valid, baseline.group_accuracy - estimate.group, np.nan)
        hi = int(np.nanargmax(gaps))
        lo = int(np.nanargmin(gaps))
        spread = gaps[hi] - gaps[lo]
        return ViolationVector(np.array([spread - eps]), extremes=(hi, lo))

    # loss-based
    if estimate.overall is None:
        vals = [float(v) for v in estimate.group[valid]]
        overall = math.fsum(vals) / len(vals) if vals else 0.0
    else:
        overall = estimate.overall
    if form.kind == EL:
        return ViolationVector(np.where(valid, estimate.group - overall, 0.0))
    # CELG: excess (negative) loss gaps against the dense losses
    excess = (estimate.group - baseline.group_loss) - (overall - baseline.loss)
    return ViolationVector(np.where(valid, excess - eps, 0.0), np.where(valid, excess, 0.0))


def project_duals(form: Formulation, multipliers: np.ndarray) -> np.ndarray:
    if form.equality:
        return multipliers
    return np.maximum(multipliers, 0.0)


def group_coefficients(form: Formulation, multipliers: np.ndarray, num_groups: int,
                       extremes: tuple[int, int] | None = None) -> np.ndarray:
    """Effective multiplier ``mu_g`` on each group's loss gap ``L_g - L``."""
    lam = np.asarray(multipliers, dtype=np.float64)
    if len(lam) != dual_dim(form, num_groups):
        raise FormulationError(
            f"{form.kind} with {num_groups} groups needs {dual_dim(form, num_groups)} multipliers, got {len(lam)}")
    if form.kind == NFT:
        return np.zeros(num_groups)
    if form.kind == TWO_SIDED:
        return lam[:num_groups] - lam[num_groups:]
    if form.kind == PW:
        mu = np.zeros(num_groups)
        if extremes is not None and extremes[0] != extremes[1]:
            mu[extremes[0]] += lam[0]
            mu[extremes[1]] -= lam[0]
        return mu
    return lam.copy()


def primal_weights(mu: np.ndarray, group_index, batch_size: int) -> np.ndarray:
    """Per-sample weights of ``L + sum_g mu_g (L_g - L)`` over the batch.

    Groups absent from the batch contribute nothing.
    """
    active = [(m, idx) for m, idx in zip(mu, group_index) if m != 0.0 and len(idx)]
    w = np.full(batch_size, (1.0 - math.fsum(m for m, _ in active)) / batch_size)
    for m, idx in active:
        w[idx] += m / len(idx)
    return w


def surrogate_penalty(form: Formulation, losses: Tensor, group_index, multipliers: np.ndarray,
                      baseline, extremes: tuple[int, int] | None = None) -> Tensor:
    """Differentiable surrogate term ``sum_j lambda_j * psi~_j`` on one batch.

    Built directly from group means rather than through the factored
    per-sample weights, so it serves as an independent check of
    :func:`primal_weights`.  Dense-model constants are plain floats.
    """
    G = len(group_index)
    mu = group_coefficients(form, multipliers, G, extremes)
    B = losses.shape[0]
    batch_mean = weighted_sum(losses, np.full(B, 1.0 / B))
    total = weighted_sum(losses, np.zeros(B))
    const = 0.0
    for gid, idx in enumerate(group_index):
        if mu[gid] == 0.0 or not len(idx):
            continue
        sel = np.zeros(B)
        sel[idx] = 1.0 / len(idx)
        total = total + scale(weighted_sum(losses, sel) - batch_mean, mu[gid])
        if form.kind in (CEAG, CELG, TWO_SIDED):
            const += mu[gid] * (baseline.loss - baseline.group_loss[gid])
        elif form.kind == PW:
            const -= mu[gid] * baseline.group_loss[gid]
    return total + const


def lagrangian_objective(form: Formulation, losses: Tensor, group_index, multipliers,
                         baseline, extremes=None) -> Tensor:
    B = losses.shape[0]
    return (weighted_sum(losses, np.full(B, 1.0 / B))
            + surrogate_penalty(form, losses, group_index, multipliers, baseline, extremes))
