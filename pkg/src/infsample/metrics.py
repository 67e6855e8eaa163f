"""Unlearning metrics for one trial and their aggregation across repetitions."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelSpec, per_example_losses, predict_labels

METRICS = ("SL", "EL", "SA", "EA", "F1", "RTE", "ME")

__all__ = [
    "METRICS",
    "MetricsReport",
    "AggregateRow",
    "self_loss",
    "exclusive_loss",
    "accuracy",
    "f1_unlearning",
    "measure_rte",
    "measure_me",
    "aggregate",
]


@dataclass
class MetricsReport:
    SL: float
    EL: float
    SA: float
    EA: float
    F1: float
    RTE: float
    ME: float
    seed: int | None = None
    sampler: str = ""
    samples: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AggregateRow:
    sampler: str
    samples: int
    count: int
    mean: dict = field(default_factory=dict)
    sd: dict = field(default_factory=dict)


def _check_nonempty(X, what):
    if len(X) == 0:
        raise ValueError(f"{what} is empty")


def self_loss(spec: ModelSpec, theta, X_removed, y_removed) -> float:
    """Summed loss over the removed points."""
    _check_nonempty(X_removed, "removed set")
    return float(per_example_losses(spec, theta, X_removed, y_removed).sum())


def exclusive_loss(spec: ModelSpec, theta, X_retained, y_retained) -> float:
    """Mean loss over test examples of the retained classes."""
    _check_nonempty(X_retained, "retained set")
    return float(per_example_losses(spec, theta, X_retained, y_retained).mean())


def accuracy(spec: ModelSpec, theta, X, y) -> float:
    _check_nonempty(X, "subset")
    return float(np.mean(predict_labels(spec, theta, X) == np.asarray(y)))


def f1_unlearning(ea: float, sa: float) -> float:
    """``2*EA*(1-SA) / (1+EA-SA)``; the 0/0 corner (EA=0, SA=1) scores 0."""
    if not (0.0 <= ea <= 1.0 and 0.0 <= sa <= 1.0):
        raise ValueError(f"EA and SA must lie in [0, 1], got EA={ea}, SA={sa}")
    den = 1.0 + ea - sa
    if den == 0.0:
        return 0.0
    return 2.0 * ea * (1.0 - sa) / den


def measure_rte(telemetry, clock: str = "wall") -> float:
    """Mean cost of the trial's influence computations.

    ``clock="wall"`` averages measured seconds; ``clock="work"`` averages the
    number of per-example Hessian-vector products, a deterministic proxy.
    """
    if not telemetry:
        raise ValueError("no telemetry to measure")
    if clock == "wall":
        values = [t.wall_time_s for t in telemetry]
    elif clock == "work":
        values = [float(t.hvp_evals) for t in telemetry]
    else:
        raise ValueError(f"unknown clock {clock!r}")
    return float(sum(values) / len(values))


def measure_me(telemetry) -> int:
    """Peak analytic memory accounting over the trial's computations."""
    if not telemetry:
        raise ValueError("no telemetry to measure")
    return int(max(t.peak_bytes for t in telemetry))


def _mean_sd(values):
    vals = np.asarray(values, dtype=np.float64)
    mean = math.fsum(vals) / vals.size
    if vals.size < 2:
        return mean, float("nan")
    sd = math.sqrt(math.fsum((vals - mean) ** 2) / (vals.size - 1))
    return mean, sd


def aggregate(reports) -> AggregateRow:
    """Per-metric mean and sample standard deviation (``n-1``).

    The result does not depend on report order: values are sorted before
    summation so that rounding is order independent too.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate zero reports")
    keys = {(r.sampler, r.samples) for r in reports}
    if len(keys) > 1:
        raise ValueError(f"heterogeneous reports: {sorted(keys)}")
    row = AggregateRow(reports[0].sampler, reports[0].samples, len(reports))
    for m in METRICS:
        row.mean[m], row.sd[m] = _mean_sd(sorted(getattr(r, m) for r in reports))
    return row
