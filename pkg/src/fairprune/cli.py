"""Command-line entry point: ``fairprune <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from .config import load_config
from .experiment import (
    cmd_evaluate,
    cmd_pretrain,
    cmd_report,
    cmd_sparsify,
    cmd_suggest_tolerance,
    seed_dir,
)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment INI file")
    p.add_argument("--seed", type=int, help="run only this seed instead of run.seeds")
    p.add_argument("--out", help="output directory (overrides run.out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the dense model by ERM")
    _common(p)

    p = sub.add_parser("sparsify", help="prune and fine-tune a dense checkpoint")
    _common(p)
    p.add_argument("--dense", help="dense checkpoint (default: <out>/seed-N/dense.ckpt)")

    p = sub.add_parser("evaluate", help="disparity report of a checkpoint against a dense baseline")
    _common(p)
    p.add_argument("--checkpoint", help="default: <out>/seed-N/sparse.ckpt")
    p.add_argument("--baseline", help="default: <out>/seed-N/dense.ckpt")

    p = sub.add_parser("report", help="aggregate seeds into avg ± std per run directory")
    p.add_argument("runs", nargs="+", help="run directories, one per configuration")
    p.add_argument("--out", help="write the aggregate as CSV here")

    p = sub.add_parser("suggest-tolerance", help="suggest a tolerance from an NFT run")
    p.add_argument("run", help="seed directory of a finished NFT run")
    p.add_argument("--fraction", type=float, default=0.5)
    return parser


def _run(args) -> int:
    if args.command == "report":
        _, table = cmd_report(args.runs, args.out)
        print(table)
        return 0
    if args.command == "suggest-tolerance":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            observed, eps = cmd_suggest_tolerance(args.run, args.fraction)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        print(json.dumps({"max_psi": observed, "suggested_epsilon": eps}))
        return 0

    cfg = load_config(args.config).with_overrides(args.seed, args.out)
    for seed in cfg.seeds:
        if args.command == "pretrain":
            path = cmd_pretrain(cfg, seed)
            print(json.dumps({"seed": seed, "checkpoint": str(path)}))
        elif args.command == "sparsify":
            res = cmd_sparsify(cfg, seed, dense_path=args.dense)
            final = [r for r in res.state.records if r["split"] == "train"][-1]
            print(json.dumps({"seed": seed, "metrics": str(res.metrics_path),
                              "train_accuracy": final["accuracy"], "train_max_psi": final["max_psi"]}))
        else:
            d = seed_dir(cfg.out_dir, seed)
            ckpt = args.checkpoint or d / "sparse.ckpt"
            base = args.baseline or d / "dense.ckpt"
            print(json.dumps(cmd_evaluate(cfg, seed, ckpt, base, cfg.out_dir)))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ValueError, OSError, ArithmeticError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
