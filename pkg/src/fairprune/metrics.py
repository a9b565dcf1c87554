"""Exact group statistics and the accuracy-gap disparity measures.

Conventions: a positive gap means the sparse model is worse than the dense
one.  ``psi[g] = group_gap[g] - gap`` is the excess accuracy gap of group g,
and the pairwise disparity is ``max(psi) - min(psi)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cross_entropy_per_sample, no_grad


class GroupMismatchError(ValueError):
    """Two statistics objects refer to different group partitions."""


@dataclass(frozen=True)
class GroupStats:
    group_accuracy: np.ndarray
    group_loss: np.ndarray
    group_sizes: np.ndarray
    accuracy: float
    loss: float

    @property
    def num_groups(self) -> int:
        return len(self.group_sizes)

    def to_dict(self) -> dict:
        return {
            "group_accuracy": [float(v) for v in self.group_accuracy],
            "group_loss": [float(v) for v in self.group_loss],
            "group_sizes": [int(v) for v in self.group_sizes],
            "accuracy": float(self.accuracy),
            "loss": float(self.loss),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupStats":
        return cls(
            np.asarray(d["group_accuracy"], dtype=np.float64),
            np.asarray(d["group_loss"], dtype=np.float64),
            np.asarray(d["group_sizes"], dtype=np.int64),
            float(d["accuracy"]),
            float(d["loss"]),
        )


@dataclass(frozen=True)
class DisparityReport:
    gap: float
    group_gaps: np.ndarray
    psi: np.ndarray
    max_psi: float
    pairwise: float


def stats_from_samples(correct: np.ndarray, losses: np.ndarray, groups: np.ndarray,
                       num_groups: int) -> GroupStats:
    """Aggregate per-sample accuracy indicators and losses by group."""
    sizes = np.bincount(groups, minlength=num_groups)
    for gid, n in enumerate(sizes):
        if n == 0:
            raise GroupMismatchError(f"group {gid} has no samples")
    hits = np.bincount(groups, weights=correct.astype(np.float64), minlength=num_groups)
    loss_sum = np.bincount(groups, weights=losses, minlength=num_groups)
    return GroupStats(
        group_accuracy=hits / sizes,
        group_loss=loss_sum / sizes,
        group_sizes=sizes.astype(np.int64),
        accuracy=float(hits.sum() / sizes.sum()),
        loss=float(loss_sum.sum() / sizes.sum()),
    )


def dataset_group_stats(model, data, chunk: int = 4096) -> GroupStats:
    """Full-pass accuracy and mean cross-entropy, overall and per group.

    Chunks are reduced in fixed order, so the result is deterministic.
    """
    correct = np.empty(len(data), dtype=bool)
    losses = np.empty(len(data))
    with no_grad():
        for start in range(0, len(data), chunk):
            sl = slice(start, start + chunk)
            logits = model.forward(Tensor(data.X[sl]))
            losses[sl] = cross_entropy_per_sample(logits, data.y[sl]).values
            correct[sl] = np.argmax(logits.values, axis=1) == data.y[sl]
    return stats_from_samples(correct, losses, data.g, data.num_groups)


def pairwise_disparity(report_or_psi) -> float:
    psi = getattr(report_or_psi, "psi", report_or_psi)
    psi = np.asarray(psi, dtype=np.float64)
    return float(psi.max() - psi.min())


def accuracy_gaps(dense: GroupStats, sparse: GroupStats) -> DisparityReport:
    if dense.num_groups != sparse.num_groups or not np.array_equal(dense.group_sizes, sparse.group_sizes):
        raise GroupMismatchError("dense and sparse statistics cover different groups")
    gap = dense.accuracy - sparse.accuracy
    group_gaps = dense.group_accuracy - sparse.group_accuracy
    psi = group_gaps - gap
    return DisparityReport(
        gap=float(gap),
        group_gaps=group_gaps,
        psi=psi,
        max_psi=float(psi.max()),
        # spread of the group gaps, equal to the spread of psi but without
        # the extra rounding of subtracting the global gap
        pairwise=float(group_gaps.max() - group_gaps.min()),
    )
