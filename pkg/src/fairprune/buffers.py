"""Per-group replay buffers of recent per-sample observations.

Each group owns a fixed-capacity FIFO.  Constraint estimates only use groups
whose buffer is full; the others report a zero excess gap.
"""

from __future__ import annotations

import math

import numpy as np

ACCURACY = "accuracy"
LOSS = "loss"


class GroupBuffer:
    """Ring buffer holding the ``capacity`` most recent observations."""

    __slots__ = ("capacity", "kind", "_data", "_head", "_count")

    def __init__(self, capacity: int, kind: str = ACCURACY) -> None:
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        if kind not in (ACCURACY, LOSS):
            raise ValueError(f"unknown observation kind {kind!r}")
        self.capacity = capacity
        self.kind = kind
        self._data = np.zeros(capacity)
        self._head = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.capacity

    def push(self, values: np.ndarray) -> None:
        n = len(values)
        if n == 0:
            return
        k = self.capacity
        if n >= k:
            self._data[:] = values[n - k:]
            self._head = 0
            self._count = k
            return
        end = self._head + n
        if end <= k:
            self._data[self._head:end] = values
        else:
            split = k - self._head
            self._data[self._head:] = values[:split]
            self._data[:n - split] = values[split:]
        self._head = end % k
        self._count = min(self._count + n, k)

    def contents(self) -> np.ndarray:
        """Stored observations, oldest first."""
        if self._count < self.capacity:
            return self._data[:self._count].copy()
        return np.concatenate((self._data[self._head:], self._data[:self._head]))

    def mean(self) -> float:
        # fsum is exactly rounded, so the result does not depend on ring order
        return math.fsum(self._data[:self._count].tolist()) / self._count


class BufferSet:
    def __init__(self, num_groups: int, capacity: int = 40, kind: str = ACCURACY) -> None:
        self.capacity = capacity
        self.kind = kind
        self.buffers = [GroupBuffer(capacity, kind) for _ in range(num_groups)]

    def __len__(self) -> int:
        return len(self.buffers)

    def push_grouped(self, values: np.ndarray, group_index) -> None:
        """Push with precomputed per-group index lists (batch order preserved)."""
        for buf, idx in zip(self.buffers, group_index):
            if len(idx):
                buf.push(values[idx])

    def full_flags(self) -> np.ndarray:
        return np.array([b.full for b in self.buffers])

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "kind": self.kind,
                "contents": [b.contents().tolist() for b in self.buffers]}

    @classmethod
    def from_dict(cls, d: dict) -> "BufferSet":
        out = cls(len(d["contents"]), d["capacity"], d["kind"])
        for buf, vals in zip(out.buffers, d["contents"]):
            buf.push(np.asarray(vals, dtype=np.float64))
        return out


def buffer_push(bufset: BufferSet, values, groups) -> None:
    values = np.asarray(values, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    if values.shape != groups.shape:
        raise ValueError(f"values {values.shape} and groups {groups.shape} differ in length")
    if len(groups) and (groups.min() < 0 or groups.max() >= len(bufset)):
        raise IndexError(f"group id outside [0, {len(bufset)})")
    if bufset.kind == ACCURACY and not np.all((values == 0.0) | (values == 1.0)):
        raise ValueError("accuracy observations must be 0 or 1")
    bufset.push_grouped(values, [np.flatnonzero(groups == gid) for gid in range(len(bufset))])


def buffers_query_group_means(bufset: BufferSet) -> tuple[np.ndarray, np.ndarray]:
    """Mean of each full buffer (0.0 placeholder for the rest) and the full flags."""
    G = len(bufset.buffers)
    means = np.zeros(G)
    full = np.zeros(G, dtype=bool)
    for gid, b in enumerate(bufset.buffers):
        if b.full:
            full[gid] = True
            means[gid] = b.mean()
    return means, full


def excess_gaps(sparse_group: np.ndarray, valid: np.ndarray, dense_group: np.ndarray,
                dense_overall: float, sparse_overall: float | None = None) -> np.ndarray:
    """``(dense_g - sparse_g) - (dense - sparse)`` on valid groups, 0 elsewhere.

    Without an explicit ``sparse_overall`` the sparse aggregate is the
    unweighted mean of the valid group values.
    """
    psi = np.zeros(len(valid))
    if not valid.any():
        return psi
    if sparse_overall is None:
        vals = sparse_group[valid].tolist()
        sparse_overall = math.fsum(vals) / len(vals)
    gap = dense_overall - sparse_overall
    psi[valid] = (dense_group[valid] - sparse_group[valid]) - gap
    return psi


def buffers_query_eag(bufset: BufferSet, baseline) -> np.ndarray:
    """Excess accuracy gaps estimated from the full accuracy buffers."""
    if bufset.kind != ACCURACY:
        raise ValueError("excess accuracy gaps need accuracy buffers")
    means, full = buffers_query_group_means(bufset)
    return excess_gaps(means, full, baseline.group_accuracy, baseline.accuracy)
