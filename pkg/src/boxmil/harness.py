"""Experiment plumbing: flat configs, training runs, evaluation, grid search.

Config files are plain ``key = value`` lines; ``#`` starts a comment.  A grid
file uses the same syntax with ``|`` separating the values to sweep::

    kind = softmax:4 | softmax:6 | softmax:8
    n_r = 10 | 20
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .data import Dataset, PerturbSpec, SyntheticSpec, generate_synthetic, load_dataset, perturb_dataset
from .estimator import BoxMILSegmenter, dice_per_group
from .losses import METHODS
from .model import NetParams, predict, save_checkpoint
from .validation import ContractError, FormatError

METRICS_HEADER = ("epoch", "loss", "val_dice_mean", "val_dice_std")
GROUP_BY = ("volume", "image")


# -- flat key/value text ----------------------------------------------------------

def parse_kv(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines to an ordered dict of strings."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{n}: empty key")
        if key in out:
            raise FormatError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict:
    try:
        with open(path) as fh:
            return parse_kv(fh.read(), str(path))
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc


def _ints(text) -> tuple:
    return tuple(int(t) for t in str(text).replace("(", "").replace(")", "").split(","))


def _floats(text) -> tuple:
    return tuple(float(t) for t in str(text).replace("(", "").replace(")", "").split(","))


def _words(text) -> tuple:
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(t) for t in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(cls, mapping: dict, parsers: dict, source: str):
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, value in mapping.items():
        if key not in known:
            raise FormatError(f"{source}: unknown key {key!r}")
        parse = parsers.get(key, str)
        try:
            kw[key] = parse(value) if isinstance(value, str) else value
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{source}: bad value for {key!r}: {value!r} ({exc})") from exc
    try:
        return cls(**kw)
    except ContractError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def _to_text(obj) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(obj, f.name))}\n" for f in fields(obj))


# -- synthetic spec files -------------------------------------------------------------

_SPEC_PARSERS = {
    "count": int, "height": int, "width": int, "n_classes": int, "shapes_per_image": _ints,
    "kinds": _words, "size_range": _ints, "noise": float, "seed": int,
    "slices_per_volume": int, "contrast": _floats,
}


def synthetic_spec_from_kv(mapping: dict, source: str = "<spec>") -> tuple[SyntheticSpec, PerturbSpec, int]:
    """A :class:`SyntheticSpec` plus optional ``perturb`` / ``perturb_seed`` keys."""
    mapping = dict(mapping)
    perturb = PerturbSpec.parse(mapping.pop("perturb", "0"))
    perturb_seed = int(mapping.pop("perturb_seed", 0))
    return _coerce(SyntheticSpec, mapping, _SPEC_PARSERS, source), perturb, perturb_seed


def generate_dataset_dir(spec_path, out_dir) -> Dataset:
    from .data import save_dataset

    spec, perturb, perturb_seed = synthetic_spec_from_kv(read_kv(spec_path), str(spec_path))
    ds = generate_synthetic(spec)
    if perturb != PerturbSpec.fixed(0):
        ds = perturb_dataset(ds, perturb, perturb_seed)
    save_dataset(ds, out_dir)
    return ds


# -- training configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run."""

    method: str = "proposed"
    train_data: str = ""
    val_data: str = ""
    group_by: str = "volume"
    perturb: str = "0"
    perturb_seed: int = 0
    seed: int = 0
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    channels: tuple = (8, 16, 32)
    dtype: str = "float32"
    threshold: float = 0.5
    lam: float = 10.0
    beta: float = 0.25
    gamma: float = 2.0
    kind: str = "softmax:4"
    polar_kind: str = "softmax:1"
    angles: str = "-40,40,20"
    n_r: int = 20
    n_theta: int = 60
    w_min: float = 0.5
    margin: int = 2
    baseline_kind: str = "hard"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.lr > 0:
            raise ContractError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.group_by not in GROUP_BY:
            raise ContractError(f"group_by must be one of {GROUP_BY}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")
        PerturbSpec.parse(self.perturb)
        self.estimator().loss_config()

    @classmethod
    def from_kv(cls, mapping: dict, source: str = "<config>") -> "TrainConfig":
        parsers = {f.name: f.type for f in fields(cls)}
        parsers = {k: {"int": int, "float": float, "tuple": _ints}.get(t, str)
                   for k, t in parsers.items()}
        return _coerce(cls, mapping, parsers, source)

    @classmethod
    def read(cls, path) -> "TrainConfig":
        return cls.from_kv(read_kv(path), str(path))

    def to_text(self) -> str:
        return _to_text(self)

    def fingerprint(self) -> str:
        """Short hash of everything except dataset locations."""
        body = "".join(line for line in self.to_text().splitlines(keepends=True)
                       if not line.startswith(("train_data", "val_data")))
        return hashlib.sha256(body.encode()).hexdigest()[:12]

    def with_(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def estimator(self, verbose=False) -> BoxMILSegmenter:
        return BoxMILSegmenter(
            method=self.method, channels=tuple(self.channels), epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            lam=self.lam, beta=self.beta, gamma=self.gamma, kind=self.kind,
            polar_kind=self.polar_kind, angles=self.angles, n_r=self.n_r, n_theta=self.n_theta,
            w_min=self.w_min, margin=self.margin, baseline_kind=self.baseline_kind,
            threshold=self.threshold, dtype=self.dtype, random_state=self.seed, verbose=verbose)


# -- evaluation --------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Grouped dice of one model on one dataset."""

    dice: list
    mean: float
    std: float
    fingerprint: str = ""
    runtime: float = 0.0
    groups: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def summary(self) -> str:
        if not self.ok:
            return f"{self.fingerprint}  FAILED: {self.error}"
        return (f"{self.fingerprint}  dice {self.mean:.4f} (std {self.std:.4f}, "
                f"{len(self.dice)} groups, {self.runtime:.1f}s)")


def group_ids(dataset: Dataset, group_by: str) -> np.ndarray:
    if group_by not in GROUP_BY:
        raise ContractError(f"group_by must be one of {GROUP_BY}")
    return np.asarray(dataset.volumes) if group_by == "volume" else np.arange(len(dataset))


def evaluate(params: NetParams, dataset: Dataset, group_by: str = "volume", threshold: float = 0.5,
             fingerprint: str = "", runtime: float = 0.0) -> EvalReport:
    """Dice of thresholded predictions against the dataset's masks, per group."""
    if params.n_classes != dataset.n_classes:
        raise ContractError(f"model predicts {params.n_classes} categories, "
                            f"dataset has {dataset.n_classes}")
    groups = group_ids(dataset, group_by)
    pred = predict(params, dataset.images) >= threshold
    ids = list(dict.fromkeys(groups.tolist()))
    d = dice_per_group(pred, dataset.masks, groups, ids)
    return EvalReport(d, float(np.mean(d)), float(np.std(d)), fingerprint, runtime, ids)


# -- training ----------------------------------------------------------------------------

@dataclass
class RunResult:
    config: TrainConfig
    estimator: BoxMILSegmenter
    report: EvalReport


def _load(path, what):
    if not path:
        raise ContractError(f"config has no {what} path")
    return load_dataset(path)


def run_experiment(config: TrainConfig, train: Dataset | None = None, val: Dataset | None = None,
                   verbose=False) -> RunResult:
    """Train in memory; datasets default to the config's paths.

    Training boxes are perturbed with ``config.perturb``; validation uses
    ground-truth masks only.
    """
    train = _load(config.train_data, "train_data") if train is None else train
    val = _load(config.val_data, "val_data") if val is None else val
    spec = PerturbSpec.parse(config.perturb)
    boxes_ds = perturb_dataset(train, spec, config.perturb_seed)
    est = config.estimator(verbose)
    groups = group_ids(val, config.group_by)
    est.fit(train.images, boxes_ds.boxes, masks=train.masks,
            eval_set=(val.images, val.masks, groups), object_masks=train.masks)
    report = evaluate(est.best_params_, val, config.group_by, config.threshold,
                      config.fingerprint(), est.fit_time_)
    return RunResult(config, est, report)


def metrics_csv(history) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRICS_HEADER)
    for row in history:
        wr.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def train(config: TrainConfig, out_dir, train: Dataset | None = None, val: Dataset | None = None,
          verbose=False) -> RunResult:
    """Train and write the run directory.

    ``out_dir`` receives ``config.txt``, ``metrics.csv`` (one row per epoch,
    epoch 0 is the untrained model), ``steps.csv``, ``origins.csv``,
    ``best.ckpt`` (highest validation dice) and ``final.ckpt``.
    """
    os.makedirs(out_dir, exist_ok=True)
    result = run_experiment(config, train, val, verbose)
    est = result.estimator
    _write(os.path.join(out_dir, "config.txt"), config.to_text())
    _write(os.path.join(out_dir, "metrics.csv"), metrics_csv(est.history_))
    _write(os.path.join(out_dir, "steps.csv"), _rows_csv(("step", "epoch", "loss"), est.steps_))
    _write(os.path.join(out_dir, "origins.csv"),
           _rows_csv(("epoch", "origins", "in_box", "in_object"), est.origin_stats_))
    save_checkpoint(est.best_params_, os.path.join(out_dir, "best.ckpt"))
    save_checkpoint(est.params_, os.path.join(out_dir, "final.ckpt"))
    return result


# -- grid search ----------------------------------------------------------------------------

def parse_grid(mapping: dict, source: str = "<grid>") -> dict:
    """``key = v1 | v2 | ...`` to ``{key: [v1, v2, ...]}`` (strings)."""
    known = {f.name for f in fields(TrainConfig)}
    grid = {}
    for key, value in mapping.items():
        if key not in known:
            raise FormatError(f"{source}: unknown key {key!r}")
        vals = [v.strip() for v in value.split("|")]
        if not all(vals):
            raise FormatError(f"{source}: empty value in grid for {key!r}")
        grid[key] = vals
    return grid


def grid_configs(base: TrainConfig, grid: dict) -> list[TrainConfig]:
    """Cartesian product in file order; the last key varies fastest."""
    keys = list(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        mapping = {f.name: getattr(base, f.name) for f in fields(base)}
        mapping.update(dict(zip(keys, combo)))
        out.append(TrainConfig.from_kv(mapping, "<grid point>"))
    return out


def _trial(args):
    config, train_ds, val_ds = args
    t0 = time.perf_counter()
    try:
        return run_experiment(config, train_ds, val_ds).report
    except Exception as exc:  # a failed trial is reported, not raised
        return EvalReport([], math.nan, math.nan, config.fingerprint(),
                          time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")


def rank_reports(reports: list) -> list:
    """Best dice first, failures last; ties keep grid order."""
    def key(item):
        i, r = item
        return (not r.ok or math.isnan(r.mean), -(r.mean if r.ok else 0.0), i)

    return [r for _, r in sorted(enumerate(reports), key=key)]


def grid_search(base: TrainConfig, grid: dict, train: Dataset | None = None,
                val: Dataset | None = None, workers: int = 1) -> list[tuple[TrainConfig, EvalReport]]:
    """Train every grid point and return ``(config, report)`` pairs ranked by dice."""
    configs = grid_configs(base, grid)
    jobs = [(c, train, val) for c in configs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_trial, jobs))
    else:
        reports = [_trial(j) for j in jobs]
    by_id = {id(r): c for c, r in zip(configs, reports)}
    return [(by_id[id(r)], r) for r in rank_reports(reports)]
