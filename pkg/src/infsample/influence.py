"""Inverse-Hessian-vector products by the LiSSA recursion, and influence edits.

The recursion solved here is the damped, scaled form

    I_k = v + (I - (H_S + damping*I) / scale) I_{k-1},   I_0 = v,

whose fixed point divided by ``scale`` is ``(H_S + damping*I)^{-1} v``. ``H_S``
is the mean Hessian over a fixed subset ``S`` of the training data, chosen
by one of the samplers. The iteration stops once ``|I_k - I_{k-1}| <= delta``.
"""
from __future__ import annotations

import logging
import resource
import sys
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count, check_inputs, check_positive
from .linalg import RngStream, as_vector, norm2, solve_spd
from .model import (
    DENSE_GUARD,
    MLPClassifier,
    ModelSpec,
    batch_grad,
    dense_hessian,
    hvp,
    softmax,
)

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e12
_FLOAT_BYTES = 8
# parameter-sized vectors live at once inside the recursion: v, I_{k-1}, I_k, H*I_{k-1}
_LISSA_PARAM_BUFFERS = 4

__all__ = [
    "LissaConfig",
    "RemovalConfig",
    "IhvpResult",
    "RemovalResult",
    "LissaDivergenceError",
    "MLPContext",
    "QuadraticContext",
    "mean_hvp",
    "estimate_scale",
    "lissa_ihvp",
    "direct_ihvp_oracle",
    "influence_vector",
    "class_removal_edit",
    "ClassRemoval",
]


class LissaDivergenceError(FloatingPointError):
    def __init__(self, iteration: int, norm: float):
        self.iteration = iteration
        self.norm = norm
        super().__init__(
            f"LiSSA iterate norm {norm:.3g} exceeded {DIVERGENCE_NORM:g} at iteration "
            f"{iteration}; increase the scale or the damping"
        )


@dataclass(frozen=True)
class LissaConfig:
    delta: float = 1e-6
    max_iters: int = 10_000
    damping: float = 0.01
    scale: float | None = None
    batch_size: int = 0
    power_iters: int = 50
    scale_factor: float = 1.1

    def __post_init__(self):
        check_positive(self.delta, "delta")
        check_count(self.max_iters, "max_iters")
        check_positive(self.damping, "damping", strict=False)
        if self.scale is not None:
            check_positive(self.scale, "scale")
        check_count(self.batch_size, "batch_size", minimum=0)
        check_count(self.power_iters, "power_iters")
        check_positive(self.scale_factor, "scale_factor")


@dataclass(frozen=True)
class RemovalConfig:
    removed_class: int
    tau: float = 1.0
    lissa: LissaConfig = field(default_factory=LissaConfig)
    per_point: bool = False

    def __post_init__(self):
        check_positive(self.tau, "tau")
        check_count(self.removed_class, "removed_class", minimum=0)


@dataclass
class IhvpResult:
    vector: np.ndarray
    iterations: int
    converged: bool
    residual: float
    wall_time_s: float
    peak_bytes: int
    scale: float
    damping: float
    hvp_evals: int = 0
    hvp_calls: int = 0
    residuals: list = field(default_factory=list, repr=False)
    rss_peak_bytes: int | None = None
    warnings: list = field(default_factory=list)

    def telemetry(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
            "wall_time_s": self.wall_time_s,
            "peak_bytes": self.peak_bytes,
        }


@dataclass
class RemovalResult:
    params: np.ndarray
    telemetry: list
    warnings: list = field(default_factory=list)


# -- model contexts ----------------------------------------------------------

class MLPContext:
    """Binds a model architecture to its training data for index-based access."""

    def __init__(self, spec: ModelSpec, inputs, labels):
        self.spec = spec
        self.inputs = check_inputs(inputs, "inputs")
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("inputs and labels differ in length")

    @classmethod
    def from_dataset(cls, spec, ds):
        return cls(spec, ds.inputs, ds.labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    def grad(self, theta, idx, reduce="mean"):
        idx = np.asarray(idx, dtype=np.int64)
        return batch_grad(self.spec, theta, self.inputs[idx], self.labels[idx], reduce=reduce)

    def point_grad(self, theta, x, y):
        return batch_grad(self.spec, theta, np.atleast_2d(x), [y])

    def hvp(self, theta, idx, v):
        idx = np.asarray(idx, dtype=np.int64)
        return hvp(self.spec, theta, self.inputs[idx], self.labels[idx], v)

    def dense_hessian(self, theta, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return dense_hessian(self.spec, theta, self.inputs[idx], self.labels[idx])

    def workspace_bytes(self, batch: int) -> int:
        # per example and layer width: activation, pre-activation, their R-versions,
        # and the backward deltas with their R-versions
        return 6 * _FLOAT_BYTES * batch * sum(self.spec.layer_sizes)


class QuadraticContext:
    """Per-example loss ``0.5 * (theta - z_i)^T A (theta - z_i)``.

    Every example has Hessian ``A``, and the minimizer of the mean loss over
    any subset is the subset mean of ``z``, which makes exact removal
    outcomes available in closed form.
    """

    def __init__(self, A, points):
        self.A = np.asarray(A, dtype=np.float64)
        self.points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        p = self.A.shape[0]
        if self.A.shape != (p, p) or self.points.shape[1] != p:
            raise ValueError("A must be p x p and points n x p")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def param_count(self) -> int:
        return self.A.shape[0]

    def loss(self, theta, idx):
        diff = theta[None, :] - self.points[np.asarray(idx)]
        return 0.5 * np.einsum("ij,jk,ik->i", diff, self.A, diff)

    def minimizer(self, idx=None):
        pts = self.points if idx is None else self.points[np.asarray(idx)]
        return pts.mean(axis=0)

    def grad(self, theta, idx, reduce="mean"):
        diff = theta[None, :] - self.points[np.asarray(idx, dtype=np.int64)]
        g = diff @ self.A.T
        return g.mean(axis=0) if reduce == "mean" else g.sum(axis=0)

    def point_grad(self, theta, x, y=None):
        return self.A @ (theta - np.asarray(x, dtype=np.float64))

    def hvp(self, theta, idx, v):
        if len(np.atleast_1d(idx)) == 0:
            raise ValueError("hvp needs a nonempty batch")
        return self.A @ v

    def dense_hessian(self, theta, idx):
        if len(np.atleast_1d(idx)) == 0:
            raise ValueError("hessian needs a nonempty batch")
        return self.A.copy()

    def workspace_bytes(self, batch: int) -> int:
        return _FLOAT_BYTES * self.param_count


def _indices(S) -> np.ndarray:
    idx = np.asarray(getattr(S, "indices", S), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("sample set is empty")
    return idx


# -- operations --------------------------------------------------------------

def mean_hvp(ctx, theta, S, v) -> np.ndarray:
    """``(1/|S|) sum_{i in S} Hess l(z_i) v``."""
    return ctx.hvp(theta, _indices(S), as_vector(v, "v"))


def estimate_scale(ctx, theta, S, damping: float = 0.0, iters: int = 50,
                   factor: float = 1.1, rng: RngStream | None = None):
    """``factor`` times the power-iteration estimate of the largest-magnitude
    eigenvalue of ``H_S + damping*I``; returns ``(scale, hvp_evals)``."""
    idx = _indices(S)
    rng = rng or RngStream(0)
    u = rng.normal(size=ctx.param_count)
    u /= np.linalg.norm(u)
    top = 0.0
    for _ in range(iters):
        w = ctx.hvp(theta, idx, u) + damping * u
        top = float(u @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        u = w / nw
    top = max(abs(top), np.linalg.norm(w) if nw else 0.0)
    return factor * max(top, damping, 1e-12), iters * idx.size


def _rss_bytes():
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(peak if sys.platform == "darwin" else peak * 1024)


def lissa_ihvp(ctx, theta, S, v, cfg: LissaConfig | None = None,
               rng: RngStream | None = None) -> IhvpResult:
    """Approximate ``(H_S + damping*I)^{-1} v`` with the LiSSA recursion.

    With ``cfg.batch_size == 0`` every iteration uses the full subset and the
    result is deterministic; otherwise each iteration draws a minibatch of
    ``S`` from ``rng``. Non-convergence within ``max_iters`` is reported via
    ``converged=False``; runaway iterates raise :class:`LissaDivergenceError`.
    """
    cfg = cfg or LissaConfig()
    idx = _indices(S)
    v = as_vector(v, "v")
    if v.shape[0] != ctx.param_count:
        raise ValueError(f"v has length {v.shape[0]}, model has {ctx.param_count} parameters")
    rng = rng or RngStream(0)
    start = time.perf_counter()

    hvp_evals = hvp_calls = 0
    if cfg.scale is None:
        scale, hvp_evals = estimate_scale(ctx, theta, idx, cfg.damping, cfg.power_iters,
                                          cfg.scale_factor, rng.spawn("scale"))
        hvp_calls = cfg.power_iters
    else:
        scale = cfg.scale
    batch = idx.size if cfg.batch_size == 0 else min(cfg.batch_size, idx.size)

    current = v.copy()
    residuals = []
    converged = False
    residual = float("inf")
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if batch == idx.size:
            sub = idx
        else:
            sub = idx[rng.generator.choice(idx.size, size=batch, replace=False)]
        hv = ctx.hvp(theta, sub, current) + cfg.damping * current
        nxt = v + current - hv / scale
        hvp_evals += sub.size
        hvp_calls += 1
        residual = norm2(nxt - current)
        residuals.append(residual)
        current = nxt
        size = norm2(current)
        if not np.isfinite(size) or size > DIVERGENCE_NORM:
            raise LissaDivergenceError(it, size)
        if residual <= cfg.delta:
            converged = True
            break

    wall = time.perf_counter() - start
    peak = (_LISSA_PARAM_BUFFERS * ctx.param_count * _FLOAT_BYTES
            + ctx.workspace_bytes(batch))
    return IhvpResult(
        vector=current / scale,
        iterations=it,
        converged=converged,
        residual=residual,
        wall_time_s=wall,
        peak_bytes=int(peak),
        scale=float(scale),
        damping=cfg.damping,
        hvp_evals=int(hvp_evals),
        hvp_calls=hvp_calls,
        residuals=residuals,
        rss_peak_bytes=_rss_bytes(),
    )


def direct_ihvp_oracle(ctx, theta, S, v, damping: float) -> np.ndarray:
    """``(H_S + damping*I)^{-1} v`` through a dense Hessian and Cholesky."""
    if ctx.param_count > DENSE_GUARD:
        raise ValueError(f"dense oracle refused: p={ctx.param_count} exceeds guard {DENSE_GUARD}")
    return solve_spd(ctx.dense_hessian(theta, _indices(S)), v, damping)


def influence_vector(ctx, theta, S, x, y, cfg: LissaConfig | None = None,
                     rng: RngStream | None = None, *, return_result: bool = False):
    """Parameter response ``-(H_S + damping*I)^{-1} grad l(z)`` to upweighting ``z``."""
    res = lissa_ihvp(ctx, theta, S, ctx.point_grad(theta, x, y), cfg, rng)
    res.vector = -res.vector
    return (res.vector, res) if return_result else res.vector


def class_removal_edit(ctx, theta, S, removed, cfg: RemovalConfig,
                       rng: RngStream | None = None) -> RemovalResult:
    """Remove a group of training points with one influence step.

    ``theta' = theta + (tau/n) * (H_S + damping*I)^{-1} sum_{z in removed} grad l(z)``,
    with ``n`` the full training-set size. ``tau = 1`` is the first-order
    value; for a quadratic loss ``tau = n / (n - |removed|)`` reproduces the
    retrained minimizer exactly.
    """
    idx = _indices(S)
    removed = np.asarray(removed, dtype=np.int64)
    if removed.size == 0:
        raise ValueError("removed set is empty")
    rng = rng or RngStream(0)
    warnings = []
    overlap = np.intersect1d(idx, removed).size
    if overlap:
        warnings.append(f"{overlap} removed points are also in the Hessian sample")
        logger.warning(warnings[-1])
    telemetry = []
    if cfg.per_point:
        step = np.zeros(ctx.param_count)
        for j, i in enumerate(removed):
            res = lissa_ihvp(ctx, theta, idx, ctx.grad(theta, [i]), cfg.lissa, rng.spawn("point", j))
            telemetry.append(res)
            step += res.vector
    else:
        g = ctx.grad(theta, removed, reduce="sum")
        res = lissa_ihvp(ctx, theta, idx, g, cfg.lissa, rng)
        telemetry.append(res)
        step = res.vector
    for res in telemetry:
        res.warnings.extend(warnings)
    return RemovalResult(theta + (cfg.tau / ctx.n) * step, telemetry, warnings)


# -- estimator ---------------------------------------------------------------

class ClassRemoval(BaseEstimator):
    """Forget one class of a fitted :class:`~infsample.model.MLPClassifier`.

    ``fit(X, y)`` takes the estimator's training data, draws the Hessian
    sample from the retained classes with ``sampler`` (all retained points
    when ``None``) and applies the influence edit. Prediction methods then
    use the edited parameters.

    ``features`` picks what a feature sampler sees: ``"intrinsic"`` (the
    estimator's penultimate layer) or ``"raw"`` inputs. A
    :class:`~infsample.samplers.LogitSampler` always receives softmax scores.
    """

    def __init__(self, estimator, removed_class, sampler=None, features="intrinsic", tau=1.0,
                 delta=1e-6, max_iters=10_000, damping=0.01, scale=None, batch_size=0,
                 random_state=0):
        self.estimator = estimator
        self.removed_class = removed_class
        self.sampler = sampler
        self.features = features
        self.tau = tau
        self.delta = delta
        self.max_iters = max_iters
        self.damping = damping
        self.scale = scale
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        from sklearn.base import clone

        from .samplers import LogitSampler

        est = self.estimator
        check_is_fitted(est, "coef_")
        X = check_inputs(X)
        y_enc = est.encode_labels(y)
        removed_id = int(est.encode_labels([self.removed_class])[0])
        removed = np.flatnonzero(y_enc == removed_id)
        pool = np.flatnonzero(y_enc != removed_id)
        if self.sampler is None:
            sample = pool
        else:
            sampler = clone(self.sampler)
            if isinstance(sampler, LogitSampler):
                feats = softmax(est.decision_function(X[pool]))
            elif self.features == "intrinsic":
                feats = est.transform(X[pool])
            elif self.features == "raw":
                feats = X[pool]
            else:
                raise ValueError(f"unknown feature mode {self.features!r}")
            sample = pool[sampler.fit_sample(feats)]
        cfg = RemovalConfig(
            removed_id, self.tau,
            LissaConfig(self.delta, self.max_iters, self.damping, self.scale, self.batch_size),
        )
        ctx = MLPContext(est.spec_, X, y_enc)
        result = class_removal_edit(ctx, est.coef_, sample, removed, cfg,
                                    RngStream.derive(self.random_state or 0, "class_removal"))
        self.coef_ = result.params
        self.sample_indices_ = sample
        self.ihvp_result_ = result.telemetry[0]
        self.edited_estimator_ = MLPClassifier.from_params(est.spec_, result.params, est.classes_)
        return self

    def predict(self, X):
        check_is_fitted(self, "edited_estimator_")
        return self.edited_estimator_.predict(X)

    def predict_proba(self, X):
        check_is_fitted(self, "edited_estimator_")
        return self.edited_estimator_.predict_proba(X)

    def score(self, X, y):
        check_is_fitted(self, "edited_estimator_")
        return self.edited_estimator_.score(X, y)
