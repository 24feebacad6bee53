"""Tabular encoding, fold assignment, synthetic multimodal data and dataset files."""
from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from .metrics import SurvivalLabel
from .tensor import load_tensor, meta_path, save_tensor

TABULAR_FIELDS = ("age", "gender", "education", "apoe4", "abeta42", "ptau181", "ttau", "fdg_pet", "av45_pet")
ALWAYS_PRESENT = ("age", "gender", "education")
OPTIONAL_FIELDS = TABULAR_FIELDS[3:]
# gender stays 0/1; everything else is standardized with training statistics
STANDARDIZED = tuple(f for f in TABULAR_FIELDS if f != "gender")
ENCODED_NAMES = TABULAR_FIELDS + tuple(f"{f}_missing" for f in OPTIONAL_FIELDS)
DIAGNOSIS_NAMES = ("CN", "MCI", "Dementia")


@dataclass
class RawTabularRecord:
    age: float
    gender: float
    education: float
    apoe4: float | None = None
    abeta42: float | None = None
    ptau181: float | None = None
    ttau: float | None = None
    fdg_pet: float | None = None
    av45_pet: float | None = None

    def __post_init__(self):
        for name in ALWAYS_PRESENT:
            v = getattr(self, name)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                raise ValueError(f"always-present field {name!r} is missing")

    def as_array(self) -> np.ndarray:
        return np.array([np.nan if getattr(self, f) is None else getattr(self, f) for f in TABULAR_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values) -> RawTabularRecord:
        vals = [None if np.isnan(v) else float(v) for v in values]
        return cls(**dict(zip(TABULAR_FIELDS, vals)))


def records_to_array(records) -> np.ndarray:
    """(n, 9) float array with NaN marking missing values."""
    if isinstance(records, np.ndarray):
        arr = np.asarray(records, dtype=float)
    else:
        arr = np.array([r.as_array() for r in records], dtype=float).reshape(-1, len(TABULAR_FIELDS))
    if arr.ndim != 2 or arr.shape[1] != len(TABULAR_FIELDS):
        raise ValueError(f"expected {len(TABULAR_FIELDS)} raw tabular columns, got shape {arr.shape}")
    present = [TABULAR_FIELDS.index(f) for f in ALWAYS_PRESENT]
    if np.isnan(arr[:, present]).any():
        bad = [ALWAYS_PRESENT[j] for j in range(3) if np.isnan(arr[:, present[j]]).any()]
        raise ValueError(f"always-present field(s) missing: {bad}")
    return arr


def encode_missingness(rec: RawTabularRecord, normalization_stats) -> np.ndarray:
    """Encode one record as 9 standardized values followed by 6 missingness indicators."""
    mean, scale = normalization_stats
    return _encode(records_to_array([rec]), np.asarray(mean), np.asarray(scale))[0]


def _encode(raw: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    missing = np.isnan(raw)
    values = (raw - mean) / scale
    values[missing] = 0.0
    opt = [TABULAR_FIELDS.index(f) for f in OPTIONAL_FIELDS]
    return np.hstack([values, missing[:, opt].astype(float)])


class TabularEncoder(TransformerMixin, BaseEstimator):
    """Standardize the raw clinical variables and append missingness indicators.

    Statistics are estimated from the data passed to :meth:`fit` only, ignoring
    missing entries. Missing values become 0 after standardization (the
    training mean) and set their indicator to 1. Output width is 15.
    """

    def fit(self, X, y=None):
        raw = records_to_array(X)
        mean = np.zeros(len(TABULAR_FIELDS))
        scale = np.ones(len(TABULAR_FIELDS))
        for j, name in enumerate(TABULAR_FIELDS):
            if name not in STANDARDIZED:
                continue
            col = raw[:, j][~np.isnan(raw[:, j])]
            if col.size:
                mean[j] = col.mean()
                sd = col.std()
                scale[j] = sd if sd > 0 else 1.0
        self.mean_, self.scale_ = mean, scale
        self.n_features_in_ = len(TABULAR_FIELDS)
        return self

    def transform(self, X):
        check_is_fitted(self, ["mean_", "scale_"])
        return _encode(records_to_array(X), self.mean_, self.scale_)

    def get_feature_names_out(self, input_features=None):
        return np.array(ENCODED_NAMES, dtype=object)

    @property
    def normalization_stats(self):
        return self.mean_, self.scale_


@dataclass
class Subject:
    id: str
    volume: np.ndarray
    tabular: RawTabularRecord
    diagnosis: int
    survival: SurvivalLabel | None = None
    z_img: float = float("nan")
    z_tab: tuple = (float("nan"), float("nan"))
    true_risk: float = float("nan")


class Dataset:
    """An ordered collection of subjects with stacked array views."""

    def __init__(self, subjects: Sequence[Subject], task: str = "diagnosis"):
        self.subjects = list(subjects)
        self.task = task
        for s in self.subjects:
            if (s.survival is not None) != (task == "survival"):
                raise ValueError(f"subject {s.id}: survival label must be present iff task is survival")
        self._index = {s.id: i for i, s in enumerate(self.subjects)}
        if len(self._index) != len(self.subjects):
            raise ValueError("duplicate subject ids")

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, i) -> Subject:
        return self.subjects[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.volume for s in self.subjects]).astype(np.float32)

    @property
    def raw_tabular(self) -> np.ndarray:
        return records_to_array([s.tabular for s in self.subjects])

    @property
    def diagnosis(self) -> np.ndarray:
        return np.array([s.diagnosis for s in self.subjects], dtype=int)

    @property
    def time(self) -> np.ndarray:
        return np.array([s.survival.time for s in self.subjects], dtype=float)

    @property
    def event(self) -> np.ndarray:
        return np.array([s.survival.event for s in self.subjects], dtype=bool)

    @property
    def true_risk(self) -> np.ndarray:
        return np.array([s.true_risk for s in self.subjects], dtype=float)

    @property
    def gender(self) -> np.ndarray:
        return np.array([s.tabular.gender for s in self.subjects], dtype=float)

    @property
    def age(self) -> np.ndarray:
        return np.array([s.tabular.age for s in self.subjects], dtype=float)

    def targets(self) -> np.ndarray:
        """Diagnosis classes, or a structured (event, time) array for survival."""
        if self.task == "diagnosis":
            return self.diagnosis
        return survival_array(self.event, self.time)

    def subset(self, ids: Iterable[str]) -> Dataset:
        return Dataset([self.subjects[self._index[i]] for i in ids], self.task)


def survival_array(event, time) -> np.ndarray:
    y = np.empty(len(time), dtype=[("event", bool), ("time", float)])
    y["event"], y["time"] = event, time
    return y


# -- folds --------------------------------------------------------------------

@dataclass
class FoldSplit:
    fold_of_subject: dict[str, int]
    k: int = 5

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.fold_of_subject.items() if f == fold]

    def fold_sizes(self) -> list[int]:
        return [len(self.fold_ids(f)) for f in range(self.k)]

    def roles(self, test_fold: int, dataset: Dataset | None = None, val_fraction: float = 0.2,
              seed: int = 0) -> dict[str, list[str]]:
        """Test = ``test_fold``; the remaining folds split 80/20 into train/val.

        With a dataset, the train/val split is stratified by diagnosis.
        """
        if not 0 <= test_fold < self.k:
            raise ValueError(f"test fold {test_fold} outside [0, {self.k})")
        test = self.fold_ids(test_fold)
        rest = [i for i, f in self.fold_of_subject.items() if f != test_fold]
        strat = None
        if dataset is not None:
            lookup = dataset.subset(rest).diagnosis
            strat = lookup if np.bincount(lookup).min() >= 2 else None
        train, val = train_test_split(rest, test_size=val_fraction, random_state=seed, stratify=strat)
        return {"train": sorted(train), "val": sorted(val), "test": sorted(test)}

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "fold"])
            for i, f in self.fold_of_subject.items():
                w.writerow([i, f])

    @classmethod
    def load(cls, path) -> FoldSplit:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        folds = {r["id"]: int(r["fold"]) for r in rows}
        return cls(folds, k=max(folds.values()) + 1)


def age_bins(ages: np.ndarray, n_bins: int = 5) -> np.ndarray:
    edges = np.quantile(ages, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, ages, side="right")


def stratified_kfold(subjects, k: int = 5, seed: int = 0) -> FoldSplit:
    """Assign subjects to ``k`` folds balanced in diagnosis, sex and age quintile.

    Cells (diagnosis x sex x age bin) are visited in sorted order and their
    shuffled members dealt round-robin, the pointer carrying over between
    cells. Each cell's per-fold counts therefore differ by at most one, and so
    do the per-fold counts of each diagnosis.
    """
    ds = subjects if isinstance(subjects, Dataset) else Dataset(subjects)
    if k > len(ds):
        raise ValueError(f"cannot make {k} folds from {len(ds)} subjects")
    rng = np.random.default_rng(seed)
    cells: dict[tuple, list[str]] = {}
    for sid, dx, sex, ab in zip(ds.ids, ds.diagnosis, ds.gender, age_bins(ds.age)):
        cells.setdefault((int(dx), int(sex), int(ab)), []).append(sid)
    folds: dict[str, int] = {}
    pointer = 0
    for key in sorted(cells):
        members = list(cells[key])
        rng.shuffle(members)
        for sid in members:
            folds[sid] = pointer % k
            pointer += 1
    return FoldSplit({sid: folds[sid] for sid in ds.ids}, k)


def holdout_split(dataset: Dataset, n_train: int, n_val: int, n_test: int, seed: int = 0) -> dict[str, list[str]]:
    """Exact-size train/val/test partition stratified by diagnosis."""
    if n_train + n_val + n_test != len(dataset):
        raise ValueError(f"sizes {n_train}+{n_val}+{n_test} do not add up to {len(dataset)} subjects")
    ids = np.array(dataset.ids)
    dx = dataset.diagnosis
    rest, test = train_test_split(ids, test_size=n_test, random_state=seed, stratify=dx)
    rest_dx = dataset.subset(rest).diagnosis
    train, val = train_test_split(rest, test_size=n_val, random_state=seed + 1, stratify=rest_dx)
    return {"train": list(train), "val": list(val), "test": list(test)}


# -- synthetic data -----------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Knobs of the synthetic generator.

    The diagnosis score is ``y = c * gate + direct_weight * d`` with ``c`` the
    image latent rescaled to [-1, 1], ``gate`` in [0, 1] and ``d`` in [-1, 1]
    carried only by the tabular biomarkers. Classes are the 40/80 % quantiles
    of y; the survival risk is ``risk_scale * y``.
    """

    n: int = 1000
    size: int = 16
    task: str = "diagnosis"
    seed: int = 0
    image_noise: float = 0.1
    tabular_noise: float = 0.1
    missing_rate: float = 0.1
    gate_open: bool = False
    direct_weight: float = 0.5
    class_fractions: tuple = (0.4, 0.4, 0.2)
    censoring_rate: float = 0.6
    risk_scale: float = 20.0
    median_time: float = 2.0

    def __post_init__(self):
        errors = []
        if self.n < 1:
            errors.append("n must be positive")
        if self.size < 4:
            errors.append("size must be at least 4")
        if self.task not in ("diagnosis", "survival"):
            errors.append(f"task must be diagnosis or survival, got {self.task!r}")
        for name in ("image_noise", "tabular_noise", "direct_weight", "risk_scale"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be non-negative")
        for name in ("missing_rate", "censoring_rate"):
            if not 0 <= getattr(self, name) < 1:
                errors.append(f"{name} must lie in [0, 1)")
        fr = tuple(self.class_fractions)
        if len(fr) != 3 or min(fr) <= 0 or not math.isclose(sum(fr), 1.0):
            errors.append("class_fractions must be three positive numbers summing to 1")
        if errors:
            raise ValueError("invalid synthetic config: " + "; ".join(errors))
        self.class_fractions = fr


def _latents(rng: np.random.Generator, n: int, cfg: SyntheticConfig):
    z_img = rng.uniform(0.0, 1.0, n)
    gate = np.ones(n) if cfg.gate_open else rng.uniform(0.0, 1.0, n)
    direct = rng.uniform(-1.0, 1.0, n)
    return z_img, gate, direct


def interaction_score(z_img, gate, direct, direct_weight: float) -> np.ndarray:
    return (2.0 * np.asarray(z_img) - 1.0) * np.asarray(gate) + direct_weight * np.asarray(direct)


@functools.lru_cache(maxsize=32)
def _reference_draw(gate_open: bool, direct_weight: float, n: int = 200_000):
    cfg = SyntheticConfig(gate_open=gate_open, direct_weight=direct_weight)
    rng = np.random.default_rng(20201)
    return interaction_score(*_latents(rng, n, cfg), direct_weight)


def class_thresholds(cfg: SyntheticConfig) -> np.ndarray:
    """Population quantiles of the diagnosis score separating CN / MCI / Dementia."""
    y = _reference_draw(cfg.gate_open, cfg.direct_weight)
    return np.quantile(y, np.cumsum(cfg.class_fractions)[:-1])


def diagnosis_from_score(y, thresholds) -> np.ndarray:
    return np.searchsorted(thresholds, y, side="right")


def _base_hazard(cfg: SyntheticConfig) -> float:
    return math.log(2.0) / cfg.median_time


@functools.lru_cache(maxsize=32)
def _censoring_horizon(gate_open: bool, direct_weight: float, risk_scale: float, median_time: float,
                       rate: float) -> float:
    """Upper end of the uniform censoring distribution giving the target censored fraction."""
    cfg = SyntheticConfig(gate_open=gate_open, direct_weight=direct_weight, risk_scale=risk_scale,
                          median_time=median_time)
    rng = np.random.default_rng(20202)
    m = 40_000
    risk = risk_scale * interaction_score(*_latents(rng, m, cfg), direct_weight)
    t_event = rng.exponential(1.0, m) / (_base_hazard(cfg) * np.exp(risk))
    u = rng.uniform(0.0, 1.0, m)
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        frac = np.mean(u * math.exp(mid) < t_event)
        if frac > rate:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def _volumes(rng, z_img, size: int, noise: float) -> np.ndarray:
    n = len(z_img)
    grid = np.arange(size) - (size - 1) / 2.0
    gz, gy, gx = np.meshgrid(grid, grid, grid, indexing="ij")
    jitter = rng.uniform(-0.5, 0.5, (n, 3))
    dist = np.sqrt((gz[None] - jitter[:, 0, None, None, None]) ** 2
                   + (gy[None] - jitter[:, 1, None, None, None]) ** 2
                   + (gx[None] - jitter[:, 2, None, None, None]) ** 2)
    radius = size * (0.15 + 0.2 * z_img)
    intensity = 0.5 + 0.5 * z_img
    # soft-edged sphere so the image varies smoothly with z_img
    blob = intensity[:, None, None, None] / (1.0 + np.exp(2.0 * (dist - radius[:, None, None, None])))
    vol = blob + noise * rng.standard_normal(blob.shape)
    return vol[:, None].astype(np.float32)


def _raw_tabular(rng, gate, direct, cfg: SyntheticConfig) -> np.ndarray:
    n = len(gate)
    e = cfg.tabular_noise * rng.standard_normal((n, 5))
    age = rng.normal(73.9, 7.2, n)
    gender = (rng.uniform(size=n) < 0.518).astype(float)
    education = np.clip(np.round(rng.normal(16.0, 2.8, n)), 6, 20)
    apoe4 = np.clip(np.round(1.0 + direct + 0.5 * rng.standard_normal(n)), 0, 2)
    abeta42 = 1100.0 - 600.0 * (gate + e[:, 0])
    av45 = 1.0 + 0.4 * (gate + e[:, 1])
    ptau = 25.0 + 10.0 * (direct + e[:, 2])
    ttau = 280.0 + 90.0 * (direct + e[:, 3])
    fdg = 1.2 - 0.1 * (direct + e[:, 4])
    raw = np.column_stack([age, gender, education, apoe4, abeta42, ptau, ttau, fdg, av45])
    drop = rng.uniform(size=(n, len(OPTIONAL_FIELDS))) < cfg.missing_rate
    raw[:, 3:][drop] = np.nan
    return raw


def generate_synthetic(cfg: SyntheticConfig | None = None, **knobs) -> Dataset:
    """Draw a synthetic image + tabular dataset with known latent ground truth.

    Each volume holds a centred soft sphere whose radius and intensity grow
    with the image latent, plus Gaussian voxel noise. The tabular biomarkers
    carry the gate and the direct effect (two noisy copies each, so one
    missing value does not erase the signal); demographics are uninformative.
    """
    if cfg is None:
        cfg = SyntheticConfig(**knobs)
    elif knobs:
        cfg = dataclasses.replace(cfg, **knobs)
    rng = np.random.default_rng(cfg.seed)
    z_img, gate, direct = _latents(rng, cfg.n, cfg)
    y = interaction_score(z_img, gate, direct, cfg.direct_weight)
    dx = diagnosis_from_score(y, class_thresholds(cfg))
    volumes = _volumes(rng, z_img, cfg.size, cfg.image_noise)
    raw = _raw_tabular(rng, gate, direct, cfg)
    risk = cfg.risk_scale * y
    survival = [None] * cfg.n
    if cfg.task == "survival":
        t_event = rng.exponential(1.0, cfg.n) / (_base_hazard(cfg) * np.exp(risk))
        if cfg.censoring_rate > 0:
            horizon = _censoring_horizon(cfg.gate_open, cfg.direct_weight, cfg.risk_scale,
                                         cfg.median_time, cfg.censoring_rate)
            t_cens = rng.uniform(0.0, 1.0, cfg.n) * horizon
        else:
            t_cens = np.full(cfg.n, np.inf)
        event = t_event <= t_cens
        observed = np.maximum(np.minimum(t_event, t_cens), 1e-12)
        survival = [SurvivalLabel(float(t), bool(ev)) for t, ev in zip(observed, event)]
    subjects = [
        Subject(id=f"S{i:05d}", volume=volumes[i], tabular=RawTabularRecord.from_array(raw[i]),
                diagnosis=int(dx[i]), survival=survival[i], z_img=float(z_img[i]),
                z_tab=(float(gate[i]), float(direct[i])), true_risk=float(risk[i]))
        for i in range(cfg.n)
    ]
    return Dataset(subjects, cfg.task)


# -- dataset files --------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_tabular_csv(path, ids, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id",) + TABULAR_FIELDS)
        for sid, rec in zip(ids, records):
            w.writerow([sid] + [_fmt(getattr(rec, f)) for f in TABULAR_FIELDS])


def read_tabular_csv(path) -> dict[str, RawTabularRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("id",) + TABULAR_FIELDS:
            raise ValueError(f"{path}: header must be {('id',) + TABULAR_FIELDS}, got {reader.fieldnames}")
        out = {}
        for row in reader:
            vals = {f: (float(row[f]) if row[f].strip() else None) for f in TABULAR_FIELDS}
            out[row["id"]] = RawTabularRecord(**vals)
    return out


def save_dataset(dataset: Dataset, path) -> Path:
    """Write a dataset directory (manifest, volumes, tabular.csv, labels.csv, latents.csv)."""
    root = Path(path)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    write_tabular_csv(root / "tabular.csv", dataset.ids, [s.tabular for s in dataset])
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        if dataset.task == "survival":
            w.writerow(["id", "diagnosis", "time", "event"])
            for s in dataset:
                w.writerow([s.id, s.diagnosis, repr(float(s.survival.time)), int(s.survival.event)])
        else:
            w.writerow(["id", "diagnosis"])
            for s in dataset:
                w.writerow([s.id, s.diagnosis])
    with open(root / "latents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "z_img", "z_gate", "z_direct", "true_risk"])
        for s in dataset:
            w.writerow([s.id, _fmt(s.z_img), _fmt(s.z_tab[0]), _fmt(s.z_tab[1]), _fmt(s.true_risk)])
    lines = [f"# daftnet dataset task={dataset.task}"]
    for name in ("tabular.csv", "labels.csv", "latents.csv"):
        lines.append(f"file\t{name}\t{_sha256(root / name)}")
    for s in dataset:
        vol = root / "volumes" / f"{s.id}.f32"
        save_tensor(vol, np.asarray(s.volume, dtype=np.float32))
        lines.append(f"subject\t{s.id}\tvolumes/{s.id}.f32\t{_sha256(vol)}\t{_sha256(meta_path(vol))}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def _verify(root: Path, rel: str, digest: str) -> Path:
    p = root / rel
    if not p.exists():
        raise FileNotFoundError(f"dataset file missing: {p}")
    if _sha256(p) != digest:
        raise ValueError(f"checksum mismatch for {p}")
    return p


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    lines = manifest.read_text().splitlines()
    header = lines[0]
    if not header.startswith("# daftnet dataset"):
        raise ValueError(f"{manifest}: not a dataset manifest")
    task = header.split("task=")[1].strip()
    files, volumes = {}, []
    for line in lines[1:]:
        parts = line.split("\t")
        if parts[0] == "file":
            files[parts[1]] = _verify(root, parts[1], parts[2])
        elif parts[0] == "subject":
            sid, rel, digest, meta_digest = parts[1:5]
            vol = _verify(root, rel, digest)
            _verify(root, str(meta_path(Path(rel))), meta_digest)
            volumes.append((sid, vol))
    records = read_tabular_csv(files["tabular.csv"])
    with open(files["labels.csv"], newline="") as fh:
        labels = {r["id"]: r for r in csv.DictReader(fh)}
    latents = {}
    if "latents.csv" in files:
        with open(files["latents.csv"], newline="") as fh:
            latents = {r["id"]: r for r in csv.DictReader(fh)}

    def num(row, key):
        return float(row[key]) if row and row.get(key, "") != "" else float("nan")

    subjects = []
    for sid, vol in volumes:
        lab = labels[sid]
        surv = SurvivalLabel(float(lab["time"]), bool(int(lab["event"]))) if task == "survival" else None
        lat = latents.get(sid)
        subjects.append(Subject(
            id=sid, volume=load_tensor(vol).data, tabular=records[sid], diagnosis=int(lab["diagnosis"]),
            survival=surv, z_img=num(lat, "z_img"), z_tab=(num(lat, "z_gate"), num(lat, "z_direct")),
            true_risk=num(lat, "true_risk")))
    return Dataset(subjects, task)


def dataset_checksum(path) -> str:
    """Digest of a dataset directory's manifest (which itself lists every file digest)."""
    return _sha256(Path(path) / "manifest.txt")
