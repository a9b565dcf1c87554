"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation appends a record to a :class:`Tape`.  Each
thread has one open tape, created lazily by the first recorded operation and
closed by the :func:`backward` call that consumes it.  Calling
:func:`backward` on a scalar walks the tape in exact reverse execution order
and accumulates gradients into the leaf tensors (``tensor.grad``).

Only what a masked multilayer perceptron with a cross-entropy loss needs is
provided: matmul, transpose, add (with row-broadcast bias), mul, scale, relu,
per-sample cross-entropy and weighted sums.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "RankError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "cross_entropy_per_sample",
    "elementwise",
    "matmul",
    "mul",
    "no_grad",
    "relu",
    "scale",
    "sub",
    "transpose",
    "weighted_sum",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(ValueError):
    """Tensor rank is not what the operation requires."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording them on any tape."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _current_tape() -> "Tape":
    ref = getattr(_local, "tape", None)
    tape = ref() if ref is not None else None
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = weakref.ref(tape)
    return tape


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of executed operations."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: BackwardFn) -> None:
        if self.consumed:
            raise RuntimeError("tape has already been consumed by backward()")
        self.records.append((out, inputs, fn))

    def backward(self, root: "Tensor") -> None:
        if root.values.size != 1:
            raise RankError(f"backward() needs a scalar, got shape {root.shape}")
        if self.consumed:
            raise RuntimeError("tape has already been consumed by backward()")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.records.clear()
        self.consumed = True


class Tensor:
    """Dense float64 array of rank <= 2 with optional gradient tracking."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 2:
            raise RankError(f"tensors have rank <= 2, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def _emit(values: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("operation produced non-finite values")
    out = Tensor(values)
    if not _grad_enabled() or not any(t.requires_grad for t in inputs):
        return out
    tape = None
    for t in inputs:
        if t._tape is not None:
            if tape is None:
                tape = t._tape
            elif t._tape is not tape:
                raise RuntimeError("operands were recorded on different tapes")
    if tape is None:
        tape = _current_tape()
    out.requires_grad = True
    out._tape = tape
    tape.record(out, inputs, fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def fn(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), fn)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise RankError(f"transpose needs a matrix, got shape {a.shape}")
    return _emit(a.values.T, (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a length-n vector ``b`` broadcasts across the rows of ``a``."""
    if a.shape == b.shape:
        return _emit(a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.values * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    active = a.values > 0
    return _emit(np.maximum(a.values, 0.0), (a,), lambda g: (g * active,))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu}


def elementwise(op: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def cross_entropy_per_sample(logits: Tensor, labels) -> Tensor:
    """Per-sample negative log-softmax of the true class, shape ``[B]``."""
    z = logits.values
    if z.ndim != 2:
        raise RankError(f"logits must be [B, K], got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sumexp = exp.sum(axis=1)
    loss = np.log(sumexp) - shifted[rows, labels]

    def fn(g):
        d = exp / sumexp[:, None]
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _emit(loss, (logits,), fn)


def weighted_sum(values: Tensor, weights) -> Tensor:
    """Scalar ``sum_i weights[i] * values[i]``; weights carry no gradient."""
    w = np.asarray(weights, dtype=np.float64)
    if values.values.ndim != 1 or w.shape != values.shape:
        raise DimensionError(f"weighted_sum shape mismatch: {values.shape} vs {w.shape}")
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("weights must be finite")
    return _emit(np.asarray(values.values @ w), (values,), lambda g: (g * w,))


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``."""
    if root.values.size != 1:
        raise RankError(f"backward() needs a scalar, got shape {root.shape}")
    if root._tape is None:
        return
    root._tape.backward(root)
