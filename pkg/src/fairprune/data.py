"""Grouped classification datasets: CSV I/O, a synthetic generator and batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataFormatError(ValueError):
    """A dataset file could not be parsed."""


class DataConfigError(ValueError):
    """A dataset request is inconsistent."""


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    X: np.ndarray
    y: np.ndarray
    g: np.ndarray
    group_names: tuple[str, ...]
    num_classes: int

    def __post_init__(self) -> None:
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        g = np.array(self.g, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],) or g.shape != y.shape:
            raise DataConfigError("X must be [N, d] with matching y and g")
        if self.num_classes < 2:
            raise DataConfigError("need at least 2 classes")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataConfigError("labels out of range")
        if len(g) and (g.min() < 0 or g.max() >= len(self.group_names)):
            raise DataConfigError("group ids out of range")
        for arr in (X, y, g):
            arr.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "group_names", tuple(str(n) for n in self.group_names))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def num_groups(self) -> int:
        return len(self.group_names)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.g, minlength=self.num_groups)

    def subset(self, idx) -> "GroupedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupedDataset(self.X[idx], self.y[idx], self.g[idx], self.group_names, self.num_classes)

    def check_groups_nonempty(self) -> None:
        sizes = self.group_sizes()
        for gid, n in enumerate(sizes):
            if n == 0:
                raise DataConfigError(f"group {self.group_names[gid]!r} has no samples")

    def same_content(self, other: "GroupedDataset") -> bool:
        return (
            self.group_names == other.group_names
            and self.num_classes == other.num_classes
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.g, other.g)
        )


@dataclass(frozen=True)
class GroupedBatch:
    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray
    g: np.ndarray
    group_index: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.y)


# --- CSV -------------------------------------------------------------------


def load_csv(path, group_names: Sequence[str] | None = None,
             num_classes: int | None = None) -> GroupedDataset:
    """Read ``f0,...,f{d-1},label,group`` rows.

    Group ids follow first appearance unless ``group_names`` is given, in which
    case ids are looked up in that table (used to align a test split with its
    training split).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        d = len(header) - 2
        expected = [f"f{i}" for i in range(d)] + ["label", "group"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise DataFormatError(f"{path}: header must be f0,...,f{{d-1}},label,group")
        names: list[str] = list(group_names) if group_names is not None else []
        lookup = {n: i for i, n in enumerate(names)}
        rows, labels, groups = [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != d + 2:
                raise DataFormatError(f"{path}:{line}: expected {d + 2} fields, got {len(row)}")
            try:
                feats = [float(v) for v in row[:d]]
                label = int(row[d])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise DataFormatError(f"{path}:{line}: non-finite feature")
            gname = row[d + 1].strip()
            if gname not in lookup:
                if group_names is not None:
                    raise DataConfigError(f"{path}:{line}: group {gname!r} absent from training groups")
                lookup[gname] = len(names)
                names.append(gname)
            rows.append(feats)
            labels.append(label)
            groups.append(lookup[gname])
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    if y.min() < 0:
        raise DataFormatError(f"{path}: negative label")
    k = num_classes if num_classes is not None else max(int(y.max()) + 1, 2)
    if y.max() >= k:
        raise DataFormatError(f"{path}: label {int(y.max())} >= num_classes {k}")
    return GroupedDataset(np.array(rows), y, np.array(groups), tuple(names), k)


def export_csv(data: GroupedDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(data.dim)] + ["label", "group"])
        for x, y, g in zip(data.X, data.y, data.g):
            w.writerow([repr(float(v)) for v in x] + [int(y), data.group_names[g]])


# --- synthetic -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int = 20
    num_classes: int = 5
    group_sizes: tuple[int, ...] = (4000, 2000, 1000, 500, 250)
    noise: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0)
    test_fraction: float = 0.25

    def __post_init__(self) -> None:
        object.__setattr__(self, "group_sizes", tuple(int(s) for s in self.group_sizes))
        object.__setattr__(self, "noise", tuple(float(s) for s in self.noise))
        if self.dim < 1 or self.num_classes < 2:
            raise DataConfigError("dim must be >= 1 and num_classes >= 2")
        if len(self.group_sizes) != len(self.noise) or not self.group_sizes:
            raise DataConfigError("group_sizes and noise must have equal, nonzero length")
        if any(s <= 0 for s in self.group_sizes) or any(s <= 0 for s in self.noise):
            raise DataConfigError("group sizes and noise scales must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise DataConfigError("test_fraction must lie in (0, 1)")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _spread(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def synthetic_generate(spec: SyntheticSpec, seed: int) -> tuple[GroupedDataset, GroupedDataset]:
    """Gaussian classes around unit-sphere means, one noise scale per group."""
    K = spec.num_classes
    for gid, n in enumerate(spec.group_sizes):
        n_test = _round_half_up(spec.test_fraction * n)
        if n_test < K or n - n_test < K:
            raise DataConfigError(f"group {gid} has fewer than {K} samples in a split")

    rng = np.random.default_rng(seed)
    means = rng.standard_normal((K, spec.dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    parts = {"train": ([], [], []), "test": ([], [], [])}
    for gid, (n, sigma) in enumerate(zip(spec.group_sizes, spec.noise)):
        per_class = _spread(n, K)
        test_per_class = _spread(_round_half_up(spec.test_fraction * n), K)
        for c in range(K):
            x = means[c] + sigma * rng.standard_normal((per_class[c], spec.dim))
            n_test = test_per_class[c]
            for name, block in (("test", x[:n_test]), ("train", x[n_test:])):
                X, y, g = parts[name]
                X.append(block)
                y.append(np.full(len(block), c))
                g.append(np.full(len(block), gid))

    names = tuple(f"g{i}" for i in range(len(spec.group_sizes)))
    out = []
    for name in ("train", "test"):
        X, y, g = (np.concatenate(p) for p in parts[name])
        perm = rng.permutation(len(y))
        out.append(GroupedDataset(X[perm], y[perm], g[perm], names, K))
    return out[0], out[1]


# --- batching --------------------------------------------------------------


def epoch_permutation(n: int, base_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([base_seed, epoch]).permutation(n)


def iterate_batches(data: GroupedDataset, batch_size: int, base_seed: int,
                    epoch: int) -> Iterator[GroupedBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = epoch_permutation(len(data), base_seed, epoch)
    G = data.num_groups
    for start in range(0, len(perm), batch_size):
        idx = perm[start:start + batch_size]
        g = data.g[idx]
        group_index = tuple(np.flatnonzero(g == gid) for gid in range(G))
        yield GroupedBatch(idx, data.X[idx], data.y[idx], g, group_index)
