"""Experiment configuration: INI files with dotted section names.

Every section and key is checked against a fixed schema before any stage
runs.  Unknown sections or keys are rejected, and missing keys take the
defaults below.  Values are Python literals (``0.9``, ``(64, 64)``, ``true``);
strings may be quoted or bare.

Example::

    [data]
    source = synthetic

    [data.synthetic]
    group_sizes = (4000, 2000, 1000, 500, 250)

    [finetune]
    formulation = ceag
    epsilon = 0.02
    dual_lr = 0.3
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import DataConfigError, SyntheticSpec
from .formulations import NFT, Formulation, FormulationError
from .model import MlpSpec, ModelSpecError
from .optim import DualConfig, LrSchedule, SgdConfig
from .pruning import GmpSchedule, ScheduleError
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "StageConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


def _literal(raw: str) -> Any:
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _as_int(v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _as_float(v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _as_bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "yes", "on", "false", "no", "off"):
        return v.lower() in ("true", "yes", "on")
    raise ValueError(f"expected a boolean, got {v!r}")


def _as_str(v: Any) -> str:
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _tuple_of(conv: Callable[[Any], Any]) -> Callable[[Any], tuple]:
    def parse(v: Any) -> tuple:
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            v = (v,)
        if not isinstance(v, (list, tuple)):
            raise ValueError(f"expected a list, got {v!r}")
        return tuple(conv(x) for x in v)
    return parse


def _optional(conv: Callable[[Any], Any]) -> Callable[[Any], Any]:
    def parse(v: Any) -> Any:
        if v is None or v == "none":
            return None
        return conv(v)
    return parse


_OPTIMIZER = {
    "lr": (_as_float, 0.01),
    "momentum": (_as_float, 0.9),
    "nesterov": (_as_bool, False),
    "weight_decay": (_as_float, 1e-4),
    "milestones": (_tuple_of(_as_float), (0.6, 0.8, 0.9)),
    "gamma": (_as_float, 0.1),
}

SCHEMA: dict[str, dict[str, tuple[Callable[[Any], Any], Any]]] = {
    "data": {
        "source": (_as_str, "synthetic"),
        "train_csv": (_optional(_as_str), None),
        "test_csv": (_optional(_as_str), None),
    },
    "data.synthetic": {
        "dim": (_as_int, 20),
        "num_classes": (_as_int, 5),
        "group_sizes": (_tuple_of(_as_int), (4000, 2000, 1000, 500, 250)),
        "noise": (_tuple_of(_as_float), (0.6, 0.7, 0.8, 0.9, 1.0)),
        "test_fraction": (_as_float, 0.25),
    },
    "model": {
        "hidden_dims": (_tuple_of(_as_int), (64, 64)),
    },
    "pretrain": {
        "epochs": (_as_int, 60),
        "batch_size": (_as_int, 32),
    },
    "pretrain.optimizer": {**_OPTIMIZER, "lr": (_as_float, 0.05)},
    "gmp": {
        "initial_sparsity": (_as_float, 0.0),
        "final_sparsity": (_as_float, 0.9),
        "start_epoch": (_as_int, 0),
        "end_epoch": (_as_int, 14),
        "frequency": (_as_int, 1),
    },
    "finetune": {
        "formulation": (_as_str, NFT),
        "epsilon": (_as_float, 0.0),
        "dual_lr": (_optional(_as_float), None),
        "use_buffers": (_as_bool, True),
        "buffer_size": (_as_int, 40),
        "epochs": (_as_int, 60),
        "batch_size": (_as_int, 128),
    },
    "finetune.optimizer": dict(_OPTIMIZER),
    "run": {
        "seeds": (_tuple_of(_as_int), (0,)),
        "out_dir": (_as_str, "runs"),
        "eval_test_each_epoch": (_as_bool, False),
    },
}


@dataclass(frozen=True)
class StageConfig:
    """Epochs plus everything the trainer needs for one stage."""

    epochs: int
    train: TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    synthetic: SyntheticSpec | None
    train_csv: str | None
    test_csv: str | None
    hidden_dims: tuple[int, ...]
    pretrain: StageConfig
    schedule: GmpSchedule
    finetune: StageConfig
    formulation: Formulation
    seeds: tuple[int, ...]
    out_dir: str
    eval_test_each_epoch: bool
    source_path: str | None = field(default=None, compare=False)

    def model_spec(self, input_dim: int, num_classes: int) -> MlpSpec:
        return MlpSpec(input_dim, self.hidden_dims, num_classes)

    def canonical(self) -> dict[str, dict[str, Any]]:
        """Normalized values, JSON-ready; seeds and output directory excluded."""
        out = {}
        for sec, keys in self.values.items():
            out[sec] = {k: list(v) if isinstance(v, tuple) else v for k, v in keys.items()
                        if not (sec == "run" and k in ("seeds", "out_dir"))}
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "ExperimentConfig":
        values = {s: dict(k) for s, k in self.values.items()}
        if seed is not None:
            values["run"]["seeds"] = (seed,)
        if out_dir is not None:
            values["run"]["out_dir"] = out_dir
        return _build(values, self.source_path)

    def to_ini(self) -> str:
        lines = []
        for sec, keys in self.values.items():
            lines.append(f"[{sec}]")
            for k, v in keys.items():
                lines.append(f"{k} = {_render(v)}")
            lines.append("")
        return "\n".join(lines)


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, str):
        return v
    return repr(v)


def _stage(sec: dict[str, Any], opt: dict[str, Any], dual_lr: float | None = None,
           use_buffers: bool = True, buffer_size: int = 40, eval_test: bool = False) -> StageConfig:
    sgd = SgdConfig(opt["lr"], opt["momentum"], opt["nesterov"], opt["weight_decay"])
    sched = LrSchedule(opt["lr"], opt["milestones"], opt["gamma"])
    dual = DualConfig(dual_lr) if dual_lr is not None else DualConfig()
    if sec["batch_size"] < 1:
        raise ConfigError("batch_size must be >= 1")
    if sec["epochs"] < 1:
        raise ConfigError("epochs must be >= 1")
    if buffer_size < 1:
        raise ConfigError("buffer_size must be >= 1")
    return StageConfig(sec["epochs"], TrainConfig(sec["batch_size"], sgd, sched, dual, use_buffers,
                                                  buffer_size, eval_test))


def _build(values: dict[str, dict[str, Any]], source_path: str | None) -> ExperimentConfig:
    data, ft, run = values["data"], values["finetune"], values["run"]
    try:
        synthetic = None
        if data["source"] == "synthetic":
            s = values["data.synthetic"]
            synthetic = SyntheticSpec(s["dim"], s["num_classes"], s["group_sizes"], s["noise"],
                                      s["test_fraction"])
        elif data["source"] == "csv":
            if not data["train_csv"] or not data["test_csv"]:
                raise ConfigError("data.source = csv needs data.train_csv and data.test_csv")
        else:
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {data['source']!r}")
        MlpSpec(1, values["model"]["hidden_dims"], 2)
        form = Formulation(ft["formulation"], ft["epsilon"])
        if form.kind != NFT and ft["dual_lr"] is None:
            raise ConfigError(f"finetune.dual_lr is required for formulation {form.kind!r}")
        schedule = GmpSchedule(**values["gmp"])
        if ft["epochs"] <= schedule.end_epoch:
            raise ConfigError(f"finetune.epochs={ft['epochs']} must exceed gmp.end_epoch={schedule.end_epoch}")
        pretrain = _stage(values["pretrain"], values["pretrain.optimizer"])
        finetune = _stage(ft, values["finetune.optimizer"], ft["dual_lr"], ft["use_buffers"],
                          ft["buffer_size"], run["eval_test_each_epoch"])
        if not run["seeds"]:
            raise ConfigError("run.seeds must list at least one seed")
        if any(s < 0 for s in run["seeds"]) or len(set(run["seeds"])) != len(run["seeds"]):
            raise ConfigError("run.seeds must be distinct non-negative integers")
    except (DataConfigError, FormulationError, ModelSpecError, ScheduleError) as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(values, synthetic, data["train_csv"], data["test_csv"],
                            values["model"]["hidden_dims"], pretrain, schedule, finetune, form,
                            run["seeds"], run["out_dir"], run["eval_test_each_epoch"], source_path)


def parse_config(text: str, source_path: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source_path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    values: dict[str, dict[str, Any]] = {}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
    for sec, keys in SCHEMA.items():
        given = dict(parser[sec]) if parser.has_section(sec) else {}
        for k in given:
            if k not in keys:
                raise ConfigError(f"unknown key {sec}.{k}")
        values[sec] = {}
        for k, (conv, default) in keys.items():
            if k not in given:
                values[sec][k] = default
                continue
            try:
                values[sec][k] = conv(_literal(given[k].strip()))
            except ValueError as exc:
                raise ConfigError(f"{sec}.{k}: {exc}") from None
    return _build(values, source_path)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def default_config() -> ExperimentConfig:
    return parse_config("")
