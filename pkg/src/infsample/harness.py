"""Class-removal sweeps: sampler x sample count x repetition.

Each trial derives its random stream from ``(base_seed, sampler, count,
repetition)``, draws a Hessian sample from the retained training classes,
applies one influence edit and scores the edited model. Trials are merged in
key order, so thread count never changes the output.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .influence import LissaConfig, MLPContext, RemovalConfig, class_removal_edit
from .linalg import RngStream
from .metrics import (
    METRICS,
    AggregateRow,
    MetricsReport,
    accuracy,
    aggregate,
    exclusive_loss,
    f1_unlearning,
    measure_me,
    measure_rte,
    self_loss,
)
from .model import Dataset, ModelSpec, TrainConfig, load_checkpoint, penultimate_features, softmax_scores, train
from .samplers import (
    SAMPLER_IDS,
    read_feature_file,
    sample_distance_weighted,
    sample_logit,
    sample_random,
    sample_topk,
)

logger = logging.getLogger(__name__)

TRIAL_COLUMNS = ["sampler", "samples", "repetition", "seed", "status", "actual_samples",
                 *METRICS, "iterations", "converged", "residual"]
AGGREGATE_COLUMNS = ["sampler", "samples"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")]
EXTRA_AGGREGATE_COLUMNS = ["count", "failed"]
TIMING_COLUMNS = ["sampler", "samples", "repetition", "wall_time_s", "rss_peak_bytes"]
DETERMINISTIC_SAMPLERS = ("ext_topk", "int_topk")

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TrialRow",
    "ResultTable",
    "default_config_dict",
    "load_config",
    "config_from_dict",
    "load_dataset",
    "make_blobs",
    "ExperimentContext",
    "prepare",
    "draw_sample",
    "run_trial",
    "run_experiment",
    "emit_results",
    "read_trials_csv",
    "aggregate_trials",
]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


# -- configuration -----------------------------------------------------------

def default_config_dict() -> dict:
    return {
        "dataset": {
            "format": "synthetic",
            "classes": 4,
            "per_class": 200,
            "dim": 10,
            "separation": 5.0,
            "spread": 1.0,
            "seed": 7,
            "test_fraction": 0.2,
        },
        "model": {"hidden": [32], "activation": "tanh", "l2_penalty": 0.01},
        "train": {"learning_rate": 0.1, "epochs": 300, "batch_size": 32, "seed": 0},
        "checkpoint": None,
        "extrinsic": {"path": None, "hidden": [16], "seed": 101},
        "removed_class": 3,
        "samplers": list(SAMPLER_IDS),
        "sample_counts": [25, 50, 100, 200],
        "repetitions": 25,
        "base_seed": 0,
        "n_clusters": None,
        "distance_eps": 0.1,
        "distance_scope": "global",
        "kmeans_max_iter": 100,
        "lissa": {
            "delta": 1e-6,
            "max_iters": 10000,
            # subset Hessians of the default blob model reach about -0.2 curvature
            "damping": 0.3,
            "scale": None,
            "batch_size": 0,
            "power_iters": 50,
            "scale_factor": 1.1,
        },
        "removal": {"tau": 1.0, "per_point": False},
        "rte_clock": "work",
        "output_dir": "results",
    }


_DATASET_KEYS = {
    "synthetic": {"format", "classes", "per_class", "dim", "separation", "spread", "seed", "test_fraction"},
    "csv": {"format", "path", "seed", "test_fraction"},
}


@dataclass
class ExperimentConfig:
    dataset: dict
    model: dict
    train: dict
    checkpoint: str | None
    extrinsic: dict
    removed_class: int
    samplers: list
    sample_counts: list
    repetitions: int
    base_seed: int
    n_clusters: int | None
    distance_eps: float
    distance_scope: str
    kmeans_max_iter: int
    lissa: dict
    removal: dict
    rte_clock: str
    output_dir: str
    base_dir: str = field(default=".", repr=False, compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def lissa_config(self) -> LissaConfig:
        return LissaConfig(**self.lissa)

    def removal_config(self) -> RemovalConfig:
        return RemovalConfig(self.removed_class, self.removal["tau"], self.lissa_config(),
                             self.removal["per_point"])

    def model_spec(self, n_features: int, n_classes: int) -> ModelSpec:
        m = self.model
        return ModelSpec((n_features, *m["hidden"], n_classes), m["activation"], m["l2_penalty"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)


def _merge_strict(defaults: dict, given: dict, path: str) -> dict:
    out = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {path}{key!r}")
        if isinstance(defaults[key], dict) and key not in ("dataset",):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be an object")
            out[key] = _merge_strict(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _require(cond, name, msg):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def config_from_dict(raw: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    defaults = default_config_dict()
    merged = _merge_strict(defaults, raw, "")

    ds = merged["dataset"]
    _require(isinstance(ds, dict), "dataset", "must be an object")
    fmt = ds.get("format", "synthetic")
    _require(fmt in _DATASET_KEYS, "dataset.format", f"must be one of {sorted(_DATASET_KEYS)}")
    unknown = set(ds) - _DATASET_KEYS[fmt]
    _require(not unknown, "dataset", f"unknown keys {sorted(unknown)} for format {fmt!r}")
    if fmt == "synthetic":
        ds = {**defaults["dataset"], **ds}
        for key in ("classes", "per_class", "dim"):
            _require(_is_int(ds[key]) and ds[key] >= 1, f"dataset.{key}", "must be a positive integer")
        _require(ds["classes"] >= 2, "dataset.classes", "must be >= 2")
        for key in ("separation", "spread"):
            _require(_is_num(ds[key]) and ds[key] >= 0, f"dataset.{key}", "must be >= 0")
    else:
        _require(isinstance(ds.get("path"), str), "dataset.path", "required for csv datasets")
        ds = {"format": "csv", "path": ds["path"], "seed": ds.get("seed", 0),
              "test_fraction": ds.get("test_fraction", 0.2)}
    _require(_is_int(ds["seed"]), "dataset.seed", "must be an integer")
    _require(_is_num(ds["test_fraction"]) and 0 < ds["test_fraction"] < 1,
             "dataset.test_fraction", "must lie in (0, 1)")
    merged["dataset"] = ds

    m = merged["model"]
    _require(isinstance(m["hidden"], list) and all(_is_int(h) and h >= 1 for h in m["hidden"]),
             "model.hidden", "must be a list of positive integers")
    _require(m["activation"] in ("tanh", "relu"), "model.activation", "must be 'tanh' or 'relu'")
    _require(_is_num(m["l2_penalty"]) and m["l2_penalty"] >= 0, "model.l2_penalty", "must be >= 0")
    t = merged["train"]
    _require(_is_num(t["learning_rate"]) and t["learning_rate"] > 0, "train.learning_rate", "must be > 0")
    _require(_is_int(t["epochs"]) and t["epochs"] >= 0, "train.epochs", "must be >= 0")
    _require(_is_int(t["batch_size"]) and t["batch_size"] >= 1, "train.batch_size", "must be >= 1")
    _require(_is_int(t["seed"]), "train.seed", "must be an integer")
    e = merged["extrinsic"]
    _require(e["path"] is None or isinstance(e["path"], str), "extrinsic.path", "must be a string or null")
    _require(isinstance(e["hidden"], list) and len(e["hidden"]) >= 1
             and all(_is_int(h) and h >= 1 for h in e["hidden"]),
             "extrinsic.hidden", "must be a nonempty list of positive integers")
    _require(merged["checkpoint"] is None or isinstance(merged["checkpoint"], str),
             "checkpoint", "must be a string or null")

    samplers = merged["samplers"]
    _require(isinstance(samplers, list) and samplers, "samplers", "must be a nonempty list")
    for s in samplers:
        _require(s in SAMPLER_IDS, "samplers", f"unknown sampler {s!r}; choose from {SAMPLER_IDS}")
    _require(len(set(samplers)) == len(samplers), "samplers", "duplicates are not allowed")
    counts = merged["sample_counts"]
    _require(isinstance(counts, list) and counts and all(_is_int(c) and c > 0 for c in counts),
             "sample_counts", "must be a nonempty list of positive integers")
    _require(_is_int(merged["repetitions"]) and merged["repetitions"] >= 1, "repetitions", "must be >= 1")
    _require(_is_int(merged["base_seed"]), "base_seed", "must be an integer")
    nc = merged["n_clusters"]
    _require(nc is None or (_is_int(nc) and nc >= 1), "n_clusters", "must be a positive integer or null")
    _require(_is_num(merged["distance_eps"]) and merged["distance_eps"] > 0, "distance_eps", "must be > 0")
    _require(merged["distance_scope"] in ("global", "cluster"), "distance_scope", "must be 'global' or 'cluster'")
    _require(_is_int(merged["kmeans_max_iter"]) and merged["kmeans_max_iter"] >= 1,
             "kmeans_max_iter", "must be >= 1")
    try:
        LissaConfig(**merged["lissa"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"lissa: {exc}") from exc
    r = merged["removal"]
    _require(_is_num(r["tau"]) and r["tau"] > 0, "removal.tau", "must be > 0")
    _require(isinstance(r["per_point"], bool), "removal.per_point", "must be a boolean")
    _require(merged["rte_clock"] in ("work", "wall"), "rte_clock", "must be 'work' or 'wall'")
    _require(isinstance(merged["output_dir"], str), "output_dir", "must be a string")
    _require(_is_int(merged["removed_class"]) and merged["removed_class"] >= 0,
             "removed_class", "must be a nonnegative integer")
    if ds["format"] == "synthetic":
        _require(merged["removed_class"] < ds["classes"], "removed_class",
                 f"must lie in [0, {ds['classes']})")
        _require(max(counts) <= ds["per_class"] * ds["classes"], "sample_counts",
                 "must not exceed the dataset size")
    return ExperimentConfig(**merged, base_dir=str(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw, base_dir=path.parent)


# -- datasets ----------------------------------------------------------------

def make_blobs(classes, per_class, dim, separation, spread, seed):
    """Gaussian blobs whose centers are pairwise ``separation`` apart when
    ``dim >= classes`` (scaled basis vectors), else random unit directions."""
    rng = RngStream.derive(seed, "blobs")
    if dim >= classes:
        centers = np.eye(dim)[:classes] * (separation / np.sqrt(2.0))
    else:
        dirs = rng.normal(size=(classes, dim))
        centers = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * separation
    X = np.concatenate([centers[k] + spread * rng.normal(size=(per_class, dim)) for k in range(classes)])
    y = np.repeat(np.arange(classes), per_class)
    return X, y


def _parse_csv(path):
    rows, labels = [], []
    ncols = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not c.strip() for c in record):
                continue
            try:
                values = [float(c) for c in record[:-1]]
                label_text = record[-1].strip()
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: non-numeric feature value") from None
            if ncols is None:
                ncols = len(record)
                if ncols < 2:
                    raise ValueError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(record) != ncols:
                raise ValueError(f"{path}:{lineno}: expected {ncols} columns, found {len(record)}")
            try:
                label_f = float(label_text)
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise ValueError(f"{path}:{lineno}: label {label_text!r} is not an integer") from None
            if not label_f.is_integer():
                raise ValueError(f"{path}:{lineno}: label {label_text!r} is not an integer")
            if not all(math.isfinite(v) for v in values):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            rows.append(values)
            labels.append(int(label_f))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    y = np.array(labels)
    present = np.unique(y)
    if present[0] != 0 or present[-1] != present.size - 1:
        raise ValueError(f"{path}: labels must be contiguous from 0, found {present.tolist()}")
    return np.array(rows), y


def load_dataset(source, fmt: str | None = None, base_dir="."):
    """Return ``(train, test)`` datasets from a CSV path or a synthetic spec dict."""
    spec = source if isinstance(source, dict) else {"format": fmt or "csv", "path": str(source)}
    fmt = spec.get("format", fmt or "csv")
    defaults = default_config_dict()["dataset"]
    if fmt == "synthetic":
        s = {**defaults, **spec}
        X, y = make_blobs(s["classes"], s["per_class"], s["dim"], s["separation"], s["spread"], s["seed"])
        n_classes = s["classes"]
    elif fmt == "csv":
        path = Path(spec["path"])
        if not path.is_absolute():
            path = Path(base_dir) / path
        X, y = _parse_csv(path)
        n_classes = int(y.max()) + 1
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    seed = spec.get("seed", 0)
    frac = spec.get("test_fraction", 0.2)
    order = RngStream.derive(seed, "split").permutation(len(y))
    n_test = int(round(frac * len(y)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (Dataset(X[train_idx], y[train_idx], "train", n_classes),
            Dataset(X[test_idx], y[test_idx], "test", n_classes))


# -- experiment --------------------------------------------------------------

@dataclass
class TrialRow:
    sampler: str
    samples: int
    repetition: int
    seed: int
    status: str
    actual_samples: int
    report: MetricsReport | None
    iterations: int = 0
    converged: bool = False
    residual: float = float("nan")
    wall_time_s: float = float("nan")
    rss_peak_bytes: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ResultTable:
    config: dict
    config_digest: str
    version: str
    baseline: MetricsReport | None
    trials: list
    aggregates: list
    failures: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


@dataclass
class ExperimentContext:
    """Everything shared by the trials of one experiment; read-only once built."""

    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    spec: ModelSpec
    theta: np.ndarray
    removed: np.ndarray
    pool: np.ndarray
    features: dict
    train_report: dict

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def n_clusters(self) -> int:
        return self.cfg.n_clusters or self.n_classes


def prepare(cfg: ExperimentConfig) -> ExperimentContext:
    """Load data, obtain the trained model and compute the sampler feature spaces."""
    train_ds, test_ds = load_dataset(cfg.dataset, base_dir=cfg.base_dir)
    if cfg.removed_class >= train_ds.n_classes:
        raise ConfigError(f"removed_class: must lie in [0, {train_ds.n_classes})")
    report = {}
    if cfg.checkpoint:
        spec, theta = load_checkpoint(cfg.resolve(cfg.checkpoint))
        if spec.n_features != train_ds.n_features or spec.n_classes != train_ds.n_classes:
            raise ConfigError("checkpoint: architecture does not match the dataset")
    else:
        spec = cfg.model_spec(train_ds.n_features, train_ds.n_classes)
        theta, report = train(spec, train_ds, cfg.train_config(), return_report=True)
    removed = np.flatnonzero(train_ds.labels == cfg.removed_class)
    pool = np.flatnonzero(train_ds.labels != cfg.removed_class)
    if removed.size == 0:
        raise ConfigError(f"removed_class: no training points carry label {cfg.removed_class}")
    if max(cfg.sample_counts) > pool.size:
        raise ConfigError(f"sample_counts: largest count exceeds the {pool.size} retained training points")

    features = {"scores": softmax_scores(spec, theta, train_ds.inputs[pool])}
    names = set(cfg.samplers)
    if names & {"int_topk", "int_distance"}:
        feats = (penultimate_features(spec, theta, train_ds.inputs[pool])
                 if spec.n_hidden_layers else train_ds.inputs[pool])
        features["intrinsic"] = feats
    if names & {"ext_topk", "ext_distance"}:
        features["extrinsic"] = extrinsic_features(cfg, train_ds)[pool]
    return ExperimentContext(cfg, train_ds, test_ds, spec, theta, removed, pool, features, report)


def extrinsic_features(cfg: ExperimentConfig, train_ds: Dataset) -> np.ndarray:
    """Rows for every training point: from the configured file, or from an
    independently trained second network standing in for an external model."""
    ext = cfg.extrinsic
    if ext["path"]:
        rows = read_feature_file(cfg.resolve(ext["path"]))
        if rows.shape[0] != len(train_ds):
            raise ConfigError(
                f"extrinsic.path: {rows.shape[0]} feature rows but {len(train_ds)} training points")
        return rows
    spec = ModelSpec((train_ds.n_features, *ext["hidden"], train_ds.n_classes),
                     cfg.model["activation"], cfg.model["l2_penalty"])
    tc = cfg.train_config()
    theta = train(spec, train_ds, TrainConfig(tc.learning_rate, tc.epochs, tc.batch_size, ext["seed"]))
    return penultimate_features(spec, theta, train_ds.inputs)


def _trial_stream(cfg, sampler, count, rep):
    return RngStream.derive(cfg.base_seed, sampler, count, rep)


def draw_sample(ctx: ExperimentContext, sampler: str, count: int, rep: int):
    """Sample for one trial, as indices into the training set."""
    cfg = ctx.cfg
    if sampler in DETERMINISTIC_SAMPLERS:
        # no repetition in the key: top-k is deterministic for fixed features
        rng = RngStream.derive(cfg.base_seed, sampler, count)
    else:
        rng = _trial_stream(cfg, sampler, count, rep).spawn("sample")
    C = ctx.n_clusters
    if sampler == "random":
        local = sample_random(ctx.pool.size, count, rng)
    elif sampler == "logit":
        local = sample_logit(ctx.features["scores"], max(1, count // ctx.n_classes), rng)
    else:
        feats = ctx.features["intrinsic" if sampler.startswith("int_") else "extrinsic"]
        k = max(1, count // C)
        if sampler.endswith("topk"):
            local = sample_topk(feats, C, k, rng, sampler=sampler, max_iter=cfg.kmeans_max_iter)
        else:
            local = sample_distance_weighted(feats, C, k, cfg.distance_eps, rng, sampler=sampler,
                                             scope=cfg.distance_scope, max_iter=cfg.kmeans_max_iter)
    local.sampler = sampler
    local.indices = ctx.pool[local.indices]
    return local


def evaluate(ctx: ExperimentContext, theta, telemetry=None, *, sampler="baseline",
             samples=0, seed=None) -> MetricsReport:
    tr, te, spec, cls = ctx.train, ctx.test, ctx.spec, ctx.cfg.removed_class
    Xr, yr = tr.inputs[ctx.removed], tr.labels[ctx.removed]
    keep = te.labels != cls
    Xk, yk = te.inputs[keep], te.labels[keep]
    sa = accuracy(spec, theta, Xr, yr)
    ea = accuracy(spec, theta, Xk, yk)
    rte = measure_rte(telemetry, ctx.cfg.rte_clock) if telemetry else 0.0
    me = float(measure_me(telemetry)) if telemetry else 0.0
    return MetricsReport(
        SL=self_loss(spec, theta, Xr, yr),
        EL=exclusive_loss(spec, theta, Xk, yk),
        SA=sa, EA=ea, F1=f1_unlearning(ea, sa), RTE=rte, ME=me,
        seed=seed, sampler=sampler, samples=samples,
    )


def run_trial(ctx: ExperimentContext, sampler: str, count: int, rep: int) -> TrialRow:
    cfg = ctx.cfg
    stream = _trial_stream(cfg, sampler, count, rep)
    try:
        sample = draw_sample(ctx, sampler, count, rep)
        mctx = MLPContext(ctx.spec, ctx.train.inputs, ctx.train.labels)
        result = class_removal_edit(mctx, ctx.theta, sample, ctx.removed, cfg.removal_config(),
                                    stream.spawn("lissa"))
        if not np.all(np.isfinite(result.params)):
            raise FloatingPointError("edited parameters are not finite")
        report = evaluate(ctx, result.params, result.telemetry, sampler=sampler,
                          samples=count, seed=stream.stream_id)
    except Exception as exc:  # recorded, the sweep continues
        logger.warning("trial %s/%d/%d failed: %s", sampler, count, rep, exc)
        return TrialRow(sampler, count, rep, stream.stream_id,
                        f"failed: {type(exc).__name__}: {exc}", 0, None)
    res = result.telemetry[-1]
    return TrialRow(sampler, count, rep, stream.stream_id, "ok", len(sample), report,
                    iterations=sum(t.iterations for t in result.telemetry),
                    converged=all(t.converged for t in result.telemetry),
                    residual=res.residual,
                    wall_time_s=sum(t.wall_time_s for t in result.telemetry),
                    rss_peak_bytes=res.rss_peak_bytes)


def aggregate_trials(trials) -> list:
    """Aggregate rows per (sampler, count) over successful trials, in first-seen order."""
    groups: dict = {}
    for t in trials:
        groups.setdefault((t.sampler, t.samples), []).append(t)
    rows = []
    for (sampler, count), members in groups.items():
        ok = [t.report for t in members if t.ok]
        if ok:
            row = aggregate(ok)
        else:
            row = AggregateRow(sampler, count, 0,
                               {m: float("nan") for m in METRICS}, {m: float("nan") for m in METRICS})
        row.failed = len(members) - len(ok)
        rows.append(row)
    return rows


def run_experiment(cfg: ExperimentConfig, threads: int = 1, ctx: ExperimentContext | None = None) -> ResultTable:
    t0 = time.perf_counter()
    ctx = ctx or prepare(cfg)
    t_prep = time.perf_counter() - t0
    keys = [(s, c, r) for s in cfg.samplers for c in cfg.sample_counts for r in range(cfg.repetitions)]
    t1 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trials = list(pool.map(lambda k: run_trial(ctx, *k), keys))
    else:
        trials = [run_trial(ctx, *k) for k in keys]
    t_trials = time.perf_counter() - t1
    baseline = evaluate(ctx, ctx.theta)
    failures = {f"{t.sampler}/{t.samples}/{t.repetition}": t.status for t in trials if not t.ok}
    return ResultTable(
        config=cfg.to_dict(),
        config_digest=cfg.digest(),
        version=__version__,
        baseline=baseline,
        trials=trials,
        aggregates=aggregate_trials(trials),
        failures=failures,
        timings={"prepare_s": t_prep, "trials_s": t_trials, "threads": threads,
                 "train": ctx.train_report},
    )


# -- serialization -----------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _trial_record(t: TrialRow) -> list:
    metrics = [getattr(t.report, m) if t.report else None for m in METRICS]
    return [t.sampler, t.samples, t.repetition, t.seed, t.status, t.actual_samples, *metrics,
            t.iterations, t.converged, t.residual]


def _baseline_record(b: MetricsReport) -> list:
    return ["baseline", 0, 0, "", "ok", 0, *[getattr(b, m) for m in METRICS], 0, True, None]


def _csv_text(header, records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for rec in records:
        w.writerow([_fmt(x) for x in rec])
    return buf.getvalue()


def emit_results(table: ResultTable, out_dir) -> dict:
    """Write ``trials.csv``, ``aggregate.csv``, ``timings.csv`` and ``manifest.json``.

    Wall-clock figures go only to ``timings.csv`` and the manifest, so
    ``trials.csv`` and ``aggregate.csv`` are byte-reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")

    trial_rows = ([_baseline_record(table.baseline)] if table.baseline else []) + \
        [_trial_record(t) for t in table.trials]
    agg_rows = []
    if table.baseline:
        b = table.baseline
        agg_rows.append(["baseline", 0, *[v for m in METRICS for v in (getattr(b, m), None)], 1, 0])
    for a in table.aggregates:
        agg_rows.append([a.sampler, a.samples, *[v for m in METRICS for v in (a.mean[m], a.sd[m])],
                         a.count, getattr(a, "failed", 0)])
    timing_rows = [[t.sampler, t.samples, t.repetition, t.wall_time_s, t.rss_peak_bytes]
                   for t in table.trials]
    texts = {
        "trials.csv": _csv_text(TRIAL_COLUMNS, trial_rows),
        "aggregate.csv": _csv_text(AGGREGATE_COLUMNS + EXTRA_AGGREGATE_COLUMNS, agg_rows),
        "timings.csv": _csv_text(TIMING_COLUMNS, timing_rows),
    }
    manifest = {
        "artifact_version": table.version,
        "config_digest": table.config_digest,
        "config": table.config,
        "versions": {"python": platform.python_version(), "numpy": np.__version__},
        "timings": table.timings,
        "n_trials": len(table.trials),
        "failures": table.failures,
        "written_at": datetime.now(timezone.utc).isoformat(),
    }
    texts["manifest.json"] = json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n"
    paths = {}
    for name, text in texts.items():
        path = out / name
        path.write_text(text)
        paths[name] = path
    return paths


def read_trials_csv(path) -> list:
    """Per-trial rows of a ``trials.csv`` as :class:`TrialRow` (baseline excluded)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["sampler"] == "baseline":
                continue
            ok = rec["status"] == "ok"
            report = None
            if ok:
                report = MetricsReport(**{m: float(rec[m]) for m in METRICS},
                                       seed=int(rec["seed"]), sampler=rec["sampler"],
                                       samples=int(rec["samples"]))
            rows.append(TrialRow(rec["sampler"], int(rec["samples"]), int(rec["repetition"]),
                                 int(rec["seed"]), rec["status"], int(rec["actual_samples"]), report,
                                 int(rec["iterations"]), rec["converged"] == "true",
                                 float(rec["residual"]) if rec["residual"] else float("nan")))
    return rows
