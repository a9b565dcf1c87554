"""Pipeline stages: pretrain, sparsify, evaluate, report, suggest-tolerance.

Each seed of a configuration lives in its own ``seed-N`` directory under the
output directory.  Every stage writes its artifacts plus a JSON manifest
holding the config hash, the seed and the artifact paths, which is enough to
re-run it.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .data import DataConfigError, GroupedDataset, load_csv, synthetic_generate
from .formulations import NFT, Formulation, dual_dim
from .metrics import DisparityReport, GroupStats, accuracy_gaps, dataset_group_stats
from .model import MaskedMlp, init_mlp, load_checkpoint, save_checkpoint
from .training import TrainState, record_columns, run_training

METRICS_SCHEMA_VERSION = 1

# stream ids mixed with the run seed; never renumber
DATA_STREAM = 0
INIT_STREAM = 1
PRETRAIN_SHUFFLE_STREAM = 2
FINETUNE_SHUFFLE_STREAM = 3


class AggregationError(ValueError):
    pass


class RunStateError(ValueError):
    pass


class MetricsParseError(ValueError):
    pass


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def seed_dir(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed-{seed}"


def load_datasets(cfg: ExperimentConfig, seed: int) -> tuple[GroupedDataset, GroupedDataset]:
    if cfg.synthetic is not None:
        return synthetic_generate(cfg.synthetic, derive_seed(seed, DATA_STREAM))
    train = load_csv(cfg.train_csv)
    test = load_csv(cfg.test_csv, group_names=train.group_names, num_classes=train.num_classes)
    if test.dim != train.dim:
        raise DataConfigError(f"test features have dim {test.dim}, train has {train.dim}")
    return train, test


# --- metrics csv -----------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(records: list[dict], columns: list[str], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([_cell(rec.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> list[dict]:
    """Rows as dicts; numeric cells become floats, empty cells ``None``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise RunStateError(f"missing metrics file {path}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:2] != ["epoch", "split"]:
        raise MetricsParseError(f"{path}: missing or malformed header")
    header = rows[0]
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise MetricsParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        rec: dict = {}
        for key, cell in zip(header, row):
            if key == "split":
                rec[key] = cell
            elif cell == "":
                rec[key] = None
            else:
                try:
                    rec[key] = int(cell) if key == "epoch" else float(cell)
                except ValueError:
                    raise MetricsParseError(f"{path}:{lineno}: bad value {cell!r} in column {key}") from None
        out.append(rec)
    return out


def _manifest(cfg: ExperimentConfig, command: str, seed: int, artifacts: dict, **extra) -> dict:
    return {
        "command": command,
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.canonical(),
        "config_path": cfg.source_path,
        "metrics_schema_version": METRICS_SCHEMA_VERSION,
        "version": __version__,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        **extra,
    }


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- stages ----------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig, seed: int, out_dir=None) -> Path:
    """ERM training of the dense model; returns the checkpoint path."""
    out = seed_dir(out_dir or cfg.out_dir, seed)
    train, test = load_datasets(cfg, seed)
    model = init_mlp(cfg.model_spec(train.dim, train.num_classes), derive_seed(seed, INIT_STREAM))
    result = run_training(model, train, total_epochs=cfg.pretrain.epochs,
                          seed=derive_seed(seed, PRETRAIN_SHUFFLE_STREAM), cfg=cfg.pretrain.train,
                          test=test, measure_disparity=False)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, metrics = out / "dense.ckpt", out / "pretrain_metrics.csv"
    save_checkpoint(result.model, ckpt)
    write_metrics_csv(result.records, record_columns(train.num_groups, 0), metrics)
    _write_json(_manifest(cfg, "pretrain", seed, {"checkpoint": ckpt, "metrics": metrics}),
                out / "pretrain_manifest.json")
    return ckpt


@dataclass
class SparsifyResult:
    model: MaskedMlp
    state: TrainState
    epoch_times: list[float]
    metrics_path: Path
    early_stop: dict | None


def nft_es_epoch(records: list[dict], first_epoch: int) -> int:
    """Best test-accuracy epoch at or after ``first_epoch``; ties go to the earliest."""
    best = None
    for rec in records:
        if rec["split"] == "test" and rec["epoch"] >= first_epoch:
            if best is None or rec["accuracy"] > best["accuracy"]:
                best = rec
    if best is None:
        raise RunStateError("no test records after the final pruning epoch")
    return best["epoch"]


def cmd_sparsify(cfg: ExperimentConfig, seed: int, out_dir=None, dense_path=None) -> SparsifyResult:
    """Baseline snapshot, gradual pruning and constrained fine-tuning."""
    out = seed_dir(out_dir or cfg.out_dir, seed)
    dense_path = Path(dense_path) if dense_path is not None else out / "dense.ckpt"
    train, test = load_datasets(cfg, seed)
    spec = cfg.model_spec(train.dim, train.num_classes)
    model = load_checkpoint(dense_path, expected=spec)
    if test.num_groups != train.num_groups:
        raise ConfigError("train and test splits have different group tables")

    track_es = cfg.formulation.kind == NFT and cfg.eval_test_each_epoch
    first_es = cfg.schedule.end_epoch
    best: dict = {}

    def keep_best(epoch, m, state):
        if not track_es or epoch < first_es:
            return
        acc = state.records[-1]["accuracy"]
        if not best or acc > best["accuracy"]:
            best.update(accuracy=acc, epoch=epoch, model=m.copy())

    result = run_training(model, train, total_epochs=cfg.finetune.epochs,
                          seed=derive_seed(seed, FINETUNE_SHUFFLE_STREAM), cfg=cfg.finetune.train,
                          form=cfg.formulation, schedule=cfg.schedule, test=test,
                          on_epoch_end=keep_best)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, metrics = out / "sparse.ckpt", out / "metrics.csv"
    save_checkpoint(result.model, ckpt)
    columns = record_columns(train.num_groups, dual_dim(cfg.formulation, train.num_groups))
    write_metrics_csv(result.records, columns, metrics)
    artifacts = {"checkpoint": ckpt, "metrics": metrics, "dense": dense_path}

    early = None
    if track_es:
        epoch = nft_es_epoch(result.records, first_es)
        assert epoch == best["epoch"]
        at = {r["split"]: r for r in result.records if r["epoch"] == epoch}
        early = {"epoch": epoch, "train": at["train"], "test": at["test"]}
        es_ckpt, es_json = out / "nft_es.ckpt", out / "nft_es.json"
        save_checkpoint(best["model"], es_ckpt)
        _write_json(early, es_json)
        artifacts.update(nft_es_checkpoint=es_ckpt, nft_es=es_json)
    _write_json(_manifest(cfg, "sparsify", seed, artifacts, formulation=cfg.formulation.kind,
                          epsilon=cfg.formulation.epsilon),
                out / "sparsify_manifest.json")
    return SparsifyResult(result.model, result.state, result.epoch_times, metrics, early)


def _report_dict(rep: DisparityReport, stats: GroupStats) -> dict:
    return {
        "accuracy": stats.accuracy,
        "group_accuracy": [float(a) for a in stats.group_accuracy],
        "gap": rep.gap,
        "group_gaps": [float(v) for v in rep.group_gaps],
        "psi": [float(v) for v in rep.psi],
        "max_psi": rep.max_psi,
        "pairwise": rep.pairwise,
    }


def cmd_evaluate(cfg: ExperimentConfig, seed: int, checkpoint, baseline, out_dir=None) -> dict:
    """Exact disparity reports of ``checkpoint`` against the dense ``baseline``."""
    train, test = load_datasets(cfg, seed)
    spec = cfg.model_spec(train.dim, train.num_classes)
    sparse = load_checkpoint(checkpoint, expected=spec)
    dense = load_checkpoint(baseline, expected=spec)
    result = {"checkpoint": str(checkpoint), "baseline": str(baseline), "sparsity": sparse.sparsity()}
    for name, split in (("train", train), ("test", test)):
        d, s = dataset_group_stats(dense, split), dataset_group_stats(sparse, split)
        result[name] = _report_dict(accuracy_gaps(d, s), s)
    if out_dir is not None:
        out = seed_dir(out_dir, seed)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(result, out / "evaluate.json")
        _write_json(_manifest(cfg, "evaluate", seed, {"report": out / "evaluate.json",
                                                      "checkpoint": checkpoint, "baseline": baseline}),
                    out / "evaluate_manifest.json")
    return result


# --- aggregation -----------------------------------------------------------

REPORT_FIELDS = ("test_accuracy", "train_max_psi", "test_max_psi", "train_pairwise", "test_pairwise")


def mean_std(values) -> tuple[float, float]:
    """Average and sample standard deviation; a single value has std 0."""
    values = [float(v) for v in values]
    if not values:
        raise AggregationError("nothing to aggregate")
    if len(values) == 1:
        return values[0], 0.0
    return statistics.fmean(values), statistics.stdev(values)


def _final(records: list[dict], split: str) -> dict:
    rows = [r for r in records if r["split"] == split]
    if not rows:
        raise RunStateError(f"no {split} records")
    return rows[-1]


def _seed_runs(run_dir: Path) -> list[Path]:
    if (run_dir / "sparsify_manifest.json").exists():
        return [run_dir]
    return sorted(p for p in run_dir.glob("seed-*") if (p / "sparsify_manifest.json").exists())


def collect_cell(run_dir) -> tuple[dict, dict[str, list[float]]]:
    run_dir = Path(run_dir)
    runs = _seed_runs(run_dir)
    if not runs:
        raise AggregationError(f"{run_dir}: no completed sparsify runs")
    manifests = [json.loads((r / "sparsify_manifest.json").read_text()) for r in runs]
    hashes = {m["config_hash"] for m in manifests}
    if len(hashes) != 1:
        raise AggregationError(f"{run_dir}: runs were produced by different configs {sorted(hashes)}")
    values: dict[str, list[float]] = {f: [] for f in REPORT_FIELDS}
    for r in runs:
        records = read_metrics_csv(r / "metrics.csv")
        tr, te = _final(records, "train"), _final(records, "test")
        values["test_accuracy"].append(te["accuracy"])
        values["train_max_psi"].append(tr["max_psi"])
        values["test_max_psi"].append(te["max_psi"])
        values["train_pairwise"].append(tr["pairwise"])
        values["test_pairwise"].append(te["pairwise"])
    info = {"cell": str(run_dir), "formulation": manifests[0]["formulation"],
            "epsilon": manifests[0]["epsilon"], "config_hash": manifests[0]["config_hash"],
            "seeds": [m["seed"] for m in manifests]}
    return info, values


def cmd_report(run_dirs, out_path=None) -> tuple[list[dict], str]:
    """Aggregate avg and std per cell; returns rows and an aligned text table."""
    if not run_dirs:
        raise AggregationError("no run directories given")
    rows = []
    for d in run_dirs:
        info, values = collect_cell(d)
        row = {"cell": info["cell"], "formulation": info["formulation"], "epsilon": info["epsilon"],
               "seeds": len(info["seeds"])}
        for f in REPORT_FIELDS:
            row[f + "_avg"], row[f + "_std"] = mean_std(values[f])
        rows.append(row)
    columns = list(rows[0])
    if out_path is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])
        Path(out_path).write_text(buf.getvalue())
    header = ["cell", "form", "eps", "n"] + [f.replace("_", " ") for f in REPORT_FIELDS]
    table = [header]
    for row in rows:
        table.append([row["cell"], row["formulation"], f"{row['epsilon']:g}", str(row["seeds"])]
                     + [f"{row[f + '_avg']:.4f} ± {row[f + '_std']:.4f}" for f in REPORT_FIELDS])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table)
    return rows, text


def cmd_suggest_tolerance(run_dir, fraction: float = 0.5) -> tuple[float, float]:
    """(final train max psi of an NFT run, suggested tolerance below it)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    run_dir = Path(run_dir)
    manifest = run_dir / "sparsify_manifest.json"
    if manifest.exists() and json.loads(manifest.read_text()).get("formulation") != NFT:
        warnings.warn(f"{run_dir} is not an NFT run", stacklevel=2)
    rec = _final(read_metrics_csv(run_dir / "metrics.csv"), "train")
    observed = rec.get("max_psi")
    if observed is None or not math.isfinite(observed):
        raise RunStateError(f"{run_dir}: final train record has no max_psi")
    if observed <= 0:
        warnings.warn("no positive disparity to constrain; suggesting 0", stacklevel=2)
        return observed, 0.0
    return observed, observed * fraction
