"""Masked multilayer perceptrons."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, matmul, mul, relu, transpose
from .metrics import GroupStats, dataset_group_stats

CHECKPOINT_MAGIC = b"FAIRPRUNE-CKPT\n"
CHECKPOINT_VERSION = 1

# dense reference statistics held fixed during fine-tuning
BaselineSnapshot = GroupStats


class ModelSpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ModelSpecError("input_dim must be positive")
        if self.num_classes < 2:
            raise ModelSpecError("num_classes must be >= 2")
        # first and last layers are never pruned, so two hidden layers are the
        # minimum for anything to be prunable
        if len(self.hidden_dims) < 2:
            raise ModelSpecError("need at least two hidden layers (three weight layers) for a prunable layer")
        if any(h < 1 for h in self.hidden_dims):
            raise ModelSpecError("hidden widths must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "num_classes": self.num_classes}


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    mask: np.ndarray
    prunable: bool

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.mask.sum()) / self.mask.size


@dataclass
class MaskedMlp:
    spec: MlpSpec
    layers: list[Layer]
    forward_count: int = field(default=0, compare=False)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_masks(self) -> list[np.ndarray | None]:
        """Mask for each entry of :meth:`parameters` (None for biases)."""
        out: list[np.ndarray | None] = []
        for layer in self.layers:
            out.extend((layer.mask, None))
        return out

    def forward(self, X: Tensor) -> Tensor:
        if X.values.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise ModelSpecError(f"input shape {X.shape} does not match input_dim {self.spec.input_dim}")
        self.forward_count += 1
        h = X
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            w = mul(layer.weight, Tensor(layer.mask))
            h = add(matmul(h, transpose(w)), layer.bias)
            if i < last:
                h = relu(h)
        return h

    __call__ = forward

    def sparsity(self) -> float:
        """Fraction of masked weights over the prunable layers."""
        total = sum(l.mask.size for l in self.layers if l.prunable)
        kept = sum(float(l.mask.sum()) for l in self.layers if l.prunable)
        return 1.0 - kept / total

    def copy(self) -> "MaskedMlp":
        layers = [Layer(Tensor(l.weight.values.copy(), requires_grad=True),
                        Tensor(l.bias.values.copy(), requires_grad=True),
                        l.mask.copy(), l.prunable) for l in self.layers]
        return MaskedMlp(self.spec, layers)

    def same_parameters(self, other: "MaskedMlp") -> bool:
        return all(
            np.array_equal(a.weight.values, b.weight.values)
            and np.array_equal(a.bias.values, b.bias.values)
            and np.array_equal(a.mask, b.mask)
            for a, b in zip(self.layers, other.layers)
        )


def init_mlp(spec: MlpSpec, seed: int) -> MaskedMlp:
    rng = np.random.default_rng(seed)
    layers = []
    n = len(spec.layer_dims)
    for i, (fan_out, fan_in) in enumerate(spec.layer_dims):
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(
            weight=Tensor(W, requires_grad=True),
            bias=Tensor(np.zeros(fan_out), requires_grad=True),
            mask=np.ones((fan_out, fan_in)),
            prunable=0 < i < n - 1,
        ))
    return MaskedMlp(spec, layers)


def forward(model: MaskedMlp, X) -> Tensor:
    return model.forward(X if isinstance(X, Tensor) else Tensor(X))


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    z = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(z, axis=1)


def per_sample_accuracy(logits, labels) -> np.ndarray:
    z = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match logits {z.shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise IndexError(f"labels must lie in [0, {z.shape[1]})")
    return np.argmax(z, axis=1) == labels


def prunable_layers(model: MaskedMlp) -> list[tuple[int, Tensor, np.ndarray]]:
    return [(i, l.weight, l.mask) for i, l in enumerate(model.layers) if l.prunable]


def snapshot_baseline(model: MaskedMlp, data) -> BaselineSnapshot:
    """Dense per-group and aggregate accuracy/loss over the whole split."""
    data.check_groups_nonempty()
    return dataset_group_stats(model, data)


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(model: MaskedMlp, path) -> None:
    header = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for layer in model.layers:
            fh.write(layer.weight.values.astype("<f8").tobytes(order="C"))
            fh.write(layer.bias.values.astype("<f8").tobytes())
            fh.write(np.packbits(layer.mask.astype(bool).ravel()).tobytes())


def load_checkpoint(path, expected: MlpSpec | None = None) -> MaskedMlp:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", raw, pos)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    try:
        spec = MlpSpec(**json.loads(raw[pos:pos + hlen]))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    pos += hlen
    if expected is not None and spec != expected:
        raise CheckpointError(f"{path}: checkpoint spec {spec} does not match {expected}")
    model = init_mlp(spec, 0)
    for layer in model.layers:
        out_d, in_d = layer.weight.shape
        nbytes = [out_d * in_d * 8, out_d * 8, (out_d * in_d + 7) // 8]
        if pos + sum(nbytes) > len(raw):
            raise CheckpointError(f"{path}: truncated layer data")
        W = np.frombuffer(raw, "<f8", out_d * in_d, pos).reshape(out_d, in_d)
        pos += nbytes[0]
        b = np.frombuffer(raw, "<f8", out_d, pos)
        pos += nbytes[1]
        bits = np.frombuffer(raw, np.uint8, nbytes[2], pos)
        pos += nbytes[2]
        layer.weight = Tensor(W.astype(np.float64), requires_grad=True)
        layer.bias = Tensor(b.astype(np.float64), requires_grad=True)
        layer.mask = np.unpackbits(bits, count=out_d * in_d).reshape(out_d, in_d).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after layer data")
    return model
