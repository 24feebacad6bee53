"""Command line entry point: ``daftnet {generate,split,train,gridsearch,evaluate,ablate}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures while running.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, RunConfig, load_config
from .data import (SyntheticConfig, dataset_checksum, generate_synthetic, holdout_split, load_dataset,
                   save_dataset, stratified_kfold)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p, out_help="output directory"):
    p.add_argument("--config", help="run configuration (INI)")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--out", help=out_help)
    p.add_argument("--workers", type=int, help="parallel grid-search runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="daftnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    _common(p, "dataset directory to create")
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--task", choices=("diagnosis", "survival"))

    p = sub.add_parser("split", help="assign subjects to folds (or explicit train/val/test roles)")
    _common(p, "split file to write")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--holdout", help="explicit role sizes TRAIN,VAL,TEST instead of folds")

    for name, text in (("train", "train one configuration"), ("gridsearch", "train every lr0 x weight_decay pair")):
        p = sub.add_parser(name, help=text)
        _common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    _common(p, "directory for results.jsonl")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("ablate", help="replace or perturb the scale/shift at test time")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--modes", default=",".join(harness.ABLATION_MODES))
    p.add_argument("--sigmas", default="0,0.5,1")
    p.add_argument("--seeds", default="0,1,2")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if args.out is not None and args.command in ("train", "gridsearch", "ablate", "evaluate"):
        changes["paths"] = dataclasses.replace(cfg.paths, out=args.out)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


def cmd_generate(args, cfg: RunConfig) -> None:
    knobs = {k: v for k, v in (("n", args.n), ("size", args.size), ("task", args.task), ("seed", args.seed))
             if v is not None}
    data_cfg = dataclasses.replace(cfg.data or SyntheticConfig(task=cfg.task), **knobs)
    out = args.out or cfg.paths.dataset
    if not out:
        raise UsageError("generate needs --out or paths.dataset")
    ds = generate_synthetic(data_cfg)
    save_dataset(ds, out)
    _print({"dataset": str(out), "subjects": len(ds), "task": ds.task, "checksum": dataset_checksum(out)})


def cmd_split(args, cfg: RunConfig) -> None:
    path = args.dataset or cfg.paths.dataset
    out = args.out or cfg.paths.split
    if not path or not out:
        raise UsageError("split needs --dataset (or paths.dataset) and --out (or paths.split)")
    ds = load_dataset(path)
    if args.holdout:
        try:
            sizes = [int(s) for s in args.holdout.split(",")]
            n_train, n_val, n_test = sizes
        except ValueError:
            raise UsageError("--holdout takes three integers TRAIN,VAL,TEST") from None
        roles = holdout_split(ds, n_train, n_val, n_test, seed=cfg.seed)
        harness.write_roles(roles, out)
        _print({"split": str(out), **{k: len(v) for k, v in roles.items()}})
        return
    folds = stratified_kfold(ds, k=args.k, seed=cfg.seed)
    folds.save(out)
    _print({"split": str(out), "fold_sizes": folds.fold_sizes()})


def _summary(res) -> dict:
    return {"run": res.name, "lr0": res.lr0, "weight_decay": res.weight_decay, "best_epoch": res.best_epoch,
            "val_metric": res.val_metric, "test_metric": res.test_metric, "checkpoint": res.checkpoint,
            "error": res.error}


def cmd_train(args, cfg: RunConfig) -> None:
    _print(_summary(harness.train(cfg)))


def cmd_gridsearch(args, cfg: RunConfig) -> None:
    results, best = harness.gridsearch(cfg)
    _print({"selected": _summary(best), "rows": len(results),
            "failed": sum(not r.ok for r in results), "table": str(Path(cfg.paths.out) / "grid.csv")})


def cmd_evaluate(args, cfg: RunConfig) -> None:
    dataset, roles = harness.resolve_data(cfg)
    record = harness.evaluate(args.checkpoint, dataset, roles, args.split)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        harness.append_jsonl(Path(args.out) / "results.jsonl", [{"kind": "evaluate", **record}])
    _print(record)


def cmd_ablate(args, cfg: RunConfig) -> None:
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s]
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError:
        raise UsageError("--sigmas takes floats and --seeds integers, comma separated") from None
    modes = [m for m in args.modes.split(",") if m]
    bad = [m for m in modes if m not in harness.ABLATION_MODES]
    if bad:
        raise UsageError(f"unknown ablation mode(s) {bad}; expected {harness.ABLATION_MODES}")
    dataset, roles = harness.resolve_data(cfg)
    rows = harness.ablate(args.checkpoint, dataset, roles, modes, sigmas, seeds, args.split)
    harness.write_ablation(cfg.paths.out, rows)
    _print(rows)


COMMANDS = {"generate": cmd_generate, "split": cmd_split, "train": cmd_train, "gridsearch": cmd_gridsearch,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"daftnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"daftnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"daftnet: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
