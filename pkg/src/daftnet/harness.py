"""Training, grid search, evaluation and scale/shift ablations over dataset directories."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, FoldSplit, TabularEncoder, load_dataset
from .estimators import estimator_for, predict_raw, score_outputs
from .fusion import (ModelConfig, build_model, fix_alpha, fix_beta, forward_with_override, modulation_stats,
                     noise_alpha, noise_beta)
from .metrics import balanced_accuracy
from .nn import load_state, save_state

log = logging.getLogger(__name__)

ABLATION_MODES = ("mean_alpha", "mean_beta", "noise_alpha", "noise_beta")
METRIC_NAME = {"diagnosis": "bacc", "survival": "cindex"}


@dataclass
class RunResult:
    name: str
    lr0: float
    weight_decay: float
    seed: int
    fold: int
    history: list = field(default_factory=list)
    best_epoch: int = -1
    val_metric: float = float("nan")
    test_metric: float = float("nan")
    test_detail: dict = field(default_factory=dict)
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)
    seconds: float = 0.0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# -- splits and arrays ---------------------------------------------------------

def write_roles(roles: dict[str, list[str]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "role"])
        for role in ("train", "val", "test"):
            for sid in roles[role]:
                w.writerow([sid, role])


def read_split(path, dataset: Dataset, fold: int = 0, seed: int = 0) -> dict[str, list[str]]:
    """Roles from a split file: either (id, fold) folds or an explicit (id, role) table."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if header == ["id", "fold"]:
        return FoldSplit.load(path).roles(fold, dataset, seed=seed)
    if header == ["id", "role"]:
        roles = {"train": [], "val": [], "test": []}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                roles[row["role"]].append(row["id"])
        return roles
    raise ValueError(f"{path}: split header must be 'id,fold' or 'id,role', got {','.join(header)}")


@dataclass
class Prepared:
    """Encoded arrays for one train/val/test assignment; the encoder sees train only."""

    encoder: TabularEncoder
    parts: dict

    def X(self, role):
        images, tabular, _ = self.parts[role]
        return images, tabular

    def y(self, role):
        return self.parts[role][2]


def prepare(dataset: Dataset, roles: dict[str, list[str]], encoder: TabularEncoder | None = None) -> Prepared:
    if encoder is None:
        encoder = TabularEncoder().fit(dataset.subset(roles["train"]).raw_tabular)
    parts = {}
    for role, ids in roles.items():
        sub = dataset.subset(ids)
        parts[role] = (sub.images, encoder.transform(sub.raw_tabular).astype(np.float32), sub.targets())
    return Prepared(encoder, parts)


def resolve_data(cfg: RunConfig, dataset=None, roles=None):
    if dataset is None:
        if not cfg.paths.dataset:
            raise ValueError("paths.dataset is not set")
        dataset = load_dataset(cfg.paths.dataset)
    if dataset.task != cfg.task:
        raise ValueError(f"dataset task {dataset.task!r} does not match run task {cfg.task!r}")
    if roles is None:
        if not cfg.paths.split:
            raise ValueError("paths.split is not set")
        roles = read_split(cfg.paths.split, dataset, cfg.fold, cfg.seed)
    return dataset, roles


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(directory, model, cfg: RunConfig, encoder: TabularEncoder, extra: dict) -> Path:
    directory = Path(directory)
    save_state(model.state_dict(), directory / "model")
    meta = {"task": cfg.task, "model": model.cfg.to_dict(),
            "encoder_mean": encoder.mean_.tolist(), "encoder_scale": encoder.scale_.tolist(), **extra}
    (directory / "run.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_checkpoint(directory):
    """Rebuild (model, encoder, metadata) from a checkpoint directory."""
    directory = Path(directory)
    if not (directory / "run.json").exists():
        raise FileNotFoundError(f"no checkpoint at {directory} (run.json missing)")
    meta = json.loads((directory / "run.json").read_text())
    model = build_model(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(load_state(directory / "model"))
    model.eval()
    encoder = TabularEncoder()
    encoder.mean_ = np.array(meta["encoder_mean"])
    encoder.scale_ = np.array(meta["encoder_scale"])
    encoder.n_features_in_ = len(encoder.mean_)
    return model, encoder, meta


# -- result files ------------------------------------------------------------------

METRIC_COLUMNS = ("run", "variant", "lr0", "weight_decay", "metric", "split", "fold", "seed", "value")


def append_jsonl(path, records) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def append_metrics(path, rows) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})


def _metric_rows(res: RunResult, cfg: RunConfig) -> list[dict]:
    name = METRIC_NAME[cfg.task]
    base = {"run": res.name, "variant": cfg.model.fusion_variant, "lr0": res.lr0,
            "weight_decay": res.weight_decay, "fold": res.fold, "seed": res.seed, "metric": name}
    rows = [{**base, "split": "val", "value": res.val_metric}, {**base, "split": "test", "value": res.test_metric}]
    for cls, rec in res.test_detail.get("recalls", {}).items():
        rows.append({**base, "metric": f"recall_{cls}", "split": "test", "value": rec})
    return rows


# -- commands ----------------------------------------------------------------------

def run_name(lr0: float, weight_decay: float) -> str:
    return f"lr{lr0:g}_wd{weight_decay:g}"


def train(cfg: RunConfig, dataset=None, roles=None, lr0=None, weight_decay=None, out=None,
          name=None, write=True) -> RunResult:
    """Train one configuration, keep the best-validation epoch and score it once on test."""
    lr0 = cfg.lr0 if lr0 is None else lr0
    weight_decay = cfg.weight_decay if weight_decay is None else weight_decay
    name = name or run_name(lr0, weight_decay)
    out = Path(out or cfg.paths.out)
    dataset, roles = resolve_data(cfg, dataset, roles)
    prep = prepare(dataset, roles)
    t0 = time.perf_counter()
    est = estimator_for(cfg.task)(variant=cfg.model.fusion_variant, model_config=cfg.model,
                                  epochs=cfg.total_epochs, batch_size=cfg.batch_size, lr=lr0,
                                  weight_decay=weight_decay, random_state=cfg.seed)
    est.fit(prep.X("train"), prep.y("train"), eval_set=(prep.X("val"), prep.y("val")))
    outputs = predict_raw(est.model_, *prep.X("test"))
    detail = {}
    if cfg.task == "diagnosis":
        test_metric, recalls = balanced_accuracy(outputs.argmax(axis=1), prep.y("test"), return_recalls=True)
        detail["recalls"] = recalls
    else:
        test_metric = score_outputs(cfg.task, outputs, prep.y("test"))
    res = RunResult(name=name, lr0=lr0, weight_decay=weight_decay, seed=cfg.seed, fold=cfg.fold,
                    history=est.history_, best_epoch=est.best_epoch_, val_metric=est.best_val_metric_,
                    test_metric=float(test_metric), test_detail=detail, config=cfg.to_dict(),
                    seconds=time.perf_counter() - t0)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(out / "ckpt" / name, est.model_, cfg, prep.encoder,
                               {"lr0": lr0, "weight_decay": weight_decay, "seed": cfg.seed,
                                "best_epoch": res.best_epoch, "test_metric": res.test_metric})
        res.checkpoint = str(ckpt)
        epochs = [{"kind": "epoch", "run": name, **rec} for rec in res.history]
        summary = {"kind": "run", **{k: v for k, v in dataclasses.asdict(res).items() if k != "history"}}
        append_jsonl(out / "results.jsonl", epochs + [summary])
        append_metrics(out / "metrics.csv", _metric_rows(res, cfg))
    return res


def _grid_job(args):
    cfg, dataset, roles, lr0, wd, out = args
    try:
        return train(cfg, dataset, roles, lr0, wd, out=out)
    except Exception as exc:  # a failed grid point is recorded, the search goes on
        log.warning("grid point lr=%g wd=%g failed: %s", lr0, wd, exc)
        return RunResult(name=run_name(lr0, wd), lr0=lr0, weight_decay=wd, seed=cfg.seed, fold=cfg.fold,
                         config=cfg.to_dict(), error=f"{type(exc).__name__}: {exc}")


def select_best(results: list[RunResult]) -> RunResult:
    """Highest validation metric; ties go to the lower learning rate, then the lower weight decay."""
    ok = [r for r in results if r.ok and not math.isnan(r.val_metric)]
    if not ok:
        raise RuntimeError("every grid point failed")
    return min(ok, key=lambda r: (-r.val_metric, r.lr0, r.weight_decay))


def gridsearch(cfg: RunConfig, dataset=None, roles=None, out=None, workers=None) -> tuple[list[RunResult], RunResult]:
    out = Path(out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, roles = resolve_data(cfg, dataset, roles)
    jobs = [(cfg, dataset, roles, lr, wd, out) for lr, wd in cfg.grid()]
    workers = workers or cfg.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_grid_job, jobs))
    else:
        results = [_grid_job(job) for job in jobs]
    best = select_best(results)
    write_grid_table(out / "grid.csv", results, best)
    append_jsonl(out / "results.jsonl", [{"kind": "selected", "run": best.name, "lr0": best.lr0,
                                          "weight_decay": best.weight_decay, "val_metric": best.val_metric,
                                          "test_metric": best.test_metric}])
    return results, best


def write_grid_table(path, results: list[RunResult], best: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "lr0", "weight_decay", "val_metric", "test_metric", "best_epoch", "selected", "error"])
        for r in results:
            w.writerow([r.name, r.lr0, r.weight_decay, r.val_metric, r.test_metric, r.best_epoch,
                        int(r is best), r.error or ""])


def evaluate(checkpoint, dataset: Dataset, roles: dict[str, list[str]], split: str = "test") -> dict:
    """Eval-mode metric of a saved model on one split (bACC + recalls, or c-index)."""
    model, encoder, meta = load_checkpoint(checkpoint)
    if meta["task"] != dataset.task:
        raise ValueError(f"checkpoint task {meta['task']!r} does not match dataset task {dataset.task!r}")
    if split not in roles:
        raise ValueError(f"unknown split {split!r}")
    prep = prepare(dataset, {split: roles[split]}, encoder)
    outputs = predict_raw(model, *prep.X(split))
    record = {"metric": METRIC_NAME[meta["task"]], "split": split, "seed": meta.get("seed"),
              "checkpoint": str(checkpoint)}
    if meta["task"] == "diagnosis":
        value, recalls = balanced_accuracy(outputs.argmax(axis=1), prep.y(split), return_recalls=True)
        record["recalls"] = recalls
    else:
        value = score_outputs("survival", outputs, prep.y(split))
    record["value"] = float(value)
    return record


def ablate(checkpoint, dataset: Dataset, roles: dict[str, list[str]], modes=ABLATION_MODES,
           sigmas=(0.0, 0.5, 1.0), seeds=(0, 1, 2), split: str = "test") -> list[dict]:
    """Metric change when the scale or shift loses its conditioning.

    ``mean_*`` replaces the vector by its train-split mean; ``noise_*`` adds
    N(0, sigma^2) per channel, repeated for every seed and averaged.
    """
    model, encoder, meta = load_checkpoint(checkpoint)
    if not model.has_modulation:
        raise ValueError(f"variant {model.variant!r} has no scale/shift to ablate")
    task = meta["task"]
    prep = prepare(dataset, {"train": roles["train"], split: roles[split]}, encoder)
    images, tabular = prep.X(split)
    target = prep.y(split)
    baseline = score_outputs(task, predict_raw(model, images, tabular), target)
    mean_a, mean_b = modulation_stats(model, *prep.X("train"))
    rows = []
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
        if mode.startswith("mean"):
            override = fix_alpha(mean_a) if mode == "mean_alpha" else fix_beta(mean_b)
            value = score_outputs(task, forward_with_override(model, images, tabular, override), target)
            rows.append({"mode": mode, "sigma": None, "value": value, "baseline": baseline,
                         "delta": value - baseline, "per_seed": None})
            continue
        for sigma in sigmas:
            make = noise_alpha if mode == "noise_alpha" else noise_beta
            per_seed = [score_outputs(task, forward_with_override(model, images, tabular, make(sigma, s)), target)
                        for s in seeds]
            value = float(np.mean(per_seed))
            rows.append({"mode": mode, "sigma": sigma, "value": value, "baseline": baseline,
                         "delta": value - baseline, "per_seed": per_seed})
    for row in rows:
        row["metric"] = METRIC_NAME[task]
        row["split"] = split
    return rows


def write_ablation(out, rows) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "sigma", "metric", "split", "value", "baseline", "delta"])
        for r in rows:
            w.writerow([r["mode"], "" if r["sigma"] is None else r["sigma"], r["metric"], r["split"],
                        r["value"], r["baseline"], r["delta"]])
    append_jsonl(out / "results.jsonl", [{"kind": "ablation", **r} for r in rows])
