"""Alternating gradient descent-ascent training with gradual pruning."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff
from .autodiff import Tensor, cross_entropy_per_sample, weighted_sum
from .buffers import BufferSet
from .data import GroupedDataset, iterate_batches
from .formulations import (
    NFT,
    DualState,
    Formulation,
    estimate_from_batch,
    estimate_from_buffers,
    group_coefficients,
    primal_weights,
    violations,
)
from .metrics import GroupStats, accuracy_gaps, dataset_group_stats
from .model import MaskedMlp, per_sample_accuracy, snapshot_baseline
from .optim import (
    DualConfig,
    LrSchedule,
    MomentumState,
    SgdConfig,
    dual_ascent_step,
    lr_at_epoch,
    sgd_step,
)
from .pruning import GmpSchedule, apply_gmp_step


class TrainingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    sgd: SgdConfig = SgdConfig()
    lr_schedule: LrSchedule = LrSchedule()
    dual: DualConfig = DualConfig()
    use_buffers: bool = True
    buffer_size: int = 40
    eval_test_each_epoch: bool = False


@dataclass
class TrainState:
    """Everything needed to resume a run at an epoch boundary."""

    epoch: int
    step: int
    momentum: MomentumState
    dual: DualState
    buffers: BufferSet | None
    baseline: GroupStats | None
    test_baseline: GroupStats | None
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "momentum": [None if m is None else m.tolist() for m in self.momentum.buffers],
            "multipliers": self.dual.multipliers.tolist(),
            "equality": self.dual.equality,
            "buffers": None if self.buffers is None else self.buffers.to_dict(),
            "baseline": None if self.baseline is None else self.baseline.to_dict(),
            "test_baseline": None if self.test_baseline is None else self.test_baseline.to_dict(),
            "records": self.records,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(
            epoch=d["epoch"],
            step=d["step"],
            momentum=MomentumState([None if m is None else np.asarray(m, dtype=np.float64)
                                    for m in d["momentum"]]),
            dual=DualState(np.asarray(d["multipliers"], dtype=np.float64), d["equality"]),
            buffers=None if d["buffers"] is None else BufferSet.from_dict(d["buffers"]),
            baseline=None if d["baseline"] is None else GroupStats.from_dict(d["baseline"]),
            test_baseline=None if d["test_baseline"] is None else GroupStats.from_dict(d["test_baseline"]),
            records=list(d["records"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class StepMetrics:
    loss: float
    accuracy: float
    multipliers: np.ndarray
    psi: np.ndarray | None


def altgda_step(model: MaskedMlp, batch, form: Formulation, state: TrainState,
                cfg: TrainConfig, lr: float) -> StepMetrics:
    """One iteration: forward, estimate, dual ascent, primal descent."""
    if len(batch) == 0:
        raise TrainingConfigError("empty batch")
    B = len(batch)
    logits = model.forward(Tensor(batch.X))
    losses = cross_entropy_per_sample(logits, batch.y)
    correct = per_sample_accuracy(logits, batch.y).astype(np.float64)

    psi = None
    extremes = None
    if form.kind != NFT:
        obs = correct if form.observation == "accuracy" else losses.values
        if cfg.use_buffers:
            state.buffers.push_grouped(obs, batch.group_index)
            estimate = estimate_from_buffers(state.buffers)
        else:
            estimate = estimate_from_batch(obs, batch.group_index)
        viol = violations(form, estimate, state.baseline)
        psi, extremes = viol.psi, viol.extremes
        dual_ascent_step(state.dual, viol, cfg.dual, form)

    mu = group_coefficients(form, state.dual.multipliers, len(batch.group_index), extremes)
    objective = weighted_sum(losses, primal_weights(mu, batch.group_index, B))
    params = model.parameters()
    for p in params:
        p.grad = None
    autodiff.backward(objective)
    sgd_step(params, model.param_masks(), state.momentum, cfg.sgd, lr)
    state.step += 1
    return StepMetrics(float(losses.values.mean()), float(correct.mean()),
                       state.dual.multipliers, psi)


# --- metrics records -------------------------------------------------------


def record_columns(num_groups: int, num_duals: int) -> list[str]:
    return (["epoch", "split", "accuracy", "loss"]
            + [f"acc_{g}" for g in range(num_groups)]
            + ["gap"]
            + [f"psi_{g}" for g in range(num_groups)]
            + ["max_psi", "pairwise", ]
            + [f"lambda_{j}" for j in range(num_duals)]
            + ["sparsity", "lr"])


def make_record(epoch: int, split: str, stats: GroupStats, reference: GroupStats | None,
                multipliers: np.ndarray, sparsity: float, lr: float) -> dict:
    rec: dict = {"epoch": epoch, "split": split, "accuracy": stats.accuracy, "loss": stats.loss}
    for g, a in enumerate(stats.group_accuracy):
        rec[f"acc_{g}"] = float(a)
    if reference is not None:
        rep = accuracy_gaps(reference, stats)
        rec["gap"] = rep.gap
        for g, v in enumerate(rep.psi):
            rec[f"psi_{g}"] = float(v)
        rec["max_psi"] = rep.max_psi
        rec["pairwise"] = rep.pairwise
    else:
        rec["gap"] = None
        for g in range(stats.num_groups):
            rec[f"psi_{g}"] = None
        rec["max_psi"] = None
        rec["pairwise"] = None
    for j, lam in enumerate(multipliers):
        rec[f"lambda_{j}"] = float(lam)
    rec["sparsity"] = sparsity
    rec["lr"] = lr
    return rec


# --- full run --------------------------------------------------------------


@dataclass
class TrainResult:
    model: MaskedMlp
    state: TrainState
    epoch_times: list[float]

    @property
    def records(self) -> list[dict]:
        return self.state.records


EpochCallback = Callable[[int, MaskedMlp, TrainState], None]


def init_state(model: MaskedMlp, train: GroupedDataset, form: Formulation, cfg: TrainConfig,
               test: GroupedDataset | None = None, measure_disparity: bool = True) -> TrainState:
    """Fresh state; the dense baseline is measured once, before any step."""
    train.check_groups_nonempty()
    baseline = test_baseline = None
    if measure_disparity:
        baseline = snapshot_baseline(model, train)
        if test is not None:
            test.check_groups_nonempty()
            test_baseline = snapshot_baseline(model, test)
    elif form.kind != NFT:
        raise TrainingConfigError(f"{form.kind} needs a dense baseline")
    buffers = None
    if form.kind != NFT and cfg.use_buffers:
        buffers = BufferSet(train.num_groups, cfg.buffer_size, form.observation)
    return TrainState(0, 0, MomentumState(), DualState.zeros(form, train.num_groups),
                      buffers, baseline, test_baseline)


def run_training(model: MaskedMlp, train: GroupedDataset, *, total_epochs: int, seed: int,
                 cfg: TrainConfig, form: Formulation = Formulation(),
                 schedule: GmpSchedule | None = None, test: GroupedDataset | None = None,
                 measure_disparity: bool = True, state: TrainState | None = None,
                 stop_epoch: int | None = None,
                 on_epoch_end: EpochCallback | None = None) -> TrainResult:
    """Prune on schedule and train with Alt-GDA under ``form``.

    Pruning epochs prune at the start of the epoch, then train for a full
    epoch.  After every epoch exact train (and optionally test) statistics are
    appended to ``state.records``.  ``stop_epoch`` ends the run early at an
    epoch boundary; passing the returned state back in resumes it.
    """
    if schedule is not None and total_epochs <= schedule.end_epoch:
        raise TrainingConfigError(
            f"total_epochs={total_epochs} must exceed the last pruning epoch {schedule.end_epoch}")
    if total_epochs < 1:
        raise TrainingConfigError("total_epochs must be >= 1")
    if test is not None and test.num_groups != train.num_groups:
        raise TrainingConfigError("train and test splits have different group tables")
    if state is None:
        state = init_state(model, train, form, cfg, test, measure_disparity)
    eval_test = test is not None and cfg.eval_test_each_epoch
    end = total_epochs if stop_epoch is None else min(stop_epoch, total_epochs)
    epoch_times = []
    for epoch in range(state.epoch, end):
        if schedule is not None and schedule.is_pruning_epoch(epoch):
            apply_gmp_step(model, schedule, epoch)
        lr = lr_at_epoch(cfg.lr_schedule, epoch, total_epochs)
        t0 = time.perf_counter()
        for batch in iterate_batches(train, cfg.batch_size, seed, epoch):
            altgda_step(model, batch, form, state, cfg, lr)
        epoch_times.append(time.perf_counter() - t0)

        sparsity = model.sparsity()
        stats = dataset_group_stats(model, train)
        state.records.append(make_record(epoch, "train", stats, state.baseline,
                                         state.dual.multipliers, sparsity, lr))
        if eval_test or (test is not None and epoch == total_epochs - 1):
            tstats = dataset_group_stats(model, test)
            state.records.append(make_record(epoch, "test", tstats, state.test_baseline,
                                             state.dual.multipliers, sparsity, lr))
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, state)
    return TrainResult(model, state, epoch_times)
