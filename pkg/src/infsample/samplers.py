"""Selection of the subset used to estimate the Hessian.

Four selection rules are available: uniform random, top-k around K-means
centroids, distance-weighted multinomial draws around the same centroids,
and per-class multinomial draws weighted by softmax scores. The feature
space can be the investigated model's penultimate layer (intrinsic), rows
from an external model (extrinsic), or the raw inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count, check_inputs, check_positive
from .linalg import CardinalityError, RngStream, sample_multinomial
from .model import penultimate_features

SAMPLER_IDS = ("random", "ext_topk", "int_topk", "ext_distance", "int_distance", "logit")
FEATURE_SOURCES = ("intrinsic", "extrinsic", "raw")

__all__ = [
    "SAMPLER_IDS",
    "FeatureMatrix",
    "KMeansResult",
    "SampleSet",
    "kmeans",
    "distance_weights",
    "sample_random",
    "sample_topk",
    "sample_distance_weighted",
    "sample_logit",
    "extract_features",
    "read_feature_file",
    "write_feature_file",
    "KMeans",
    "RandomSampler",
    "TopKSampler",
    "DistanceWeightedSampler",
    "LogitSampler",
]


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray
    source: str = "raw"

    def __post_init__(self):
        if self.source not in FEATURE_SOURCES:
            raise ValueError(f"unknown feature source {self.source!r}")
        object.__setattr__(self, "rows", check_inputs(self.rows, "features"))

    def __len__(self) -> int:
        return self.rows.shape[0]


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0


@dataclass
class SampleSet:
    indices: np.ndarray
    sampler: str
    seed: int | None = None
    group_sizes: tuple = ()

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size and (self.indices.min() < 0
                                  or np.unique(self.indices).size != self.indices.size):
            raise ValueError("sample indices must be distinct and nonnegative")

    def __len__(self) -> int:
        return self.indices.size

    def to_dict(self) -> dict:
        return {
            "sampler": self.sampler,
            "seed": self.seed,
            "group_sizes": list(self.group_sizes),
            "indices": self.indices.tolist(),
        }


def _sq_dists(X, C):
    # (n, C) squared Euclidean distances, clipped against cancellation
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _inertia(X, centroids, assign):
    # direct differences: the expanded form in _sq_dists leaves rounding residue at 0
    return float(((X - centroids[assign]) ** 2).sum())


def _kmeanspp(X, n_clusters, rng):
    n = X.shape[0]
    picked = [int(rng.integers(n))]
    closest = _sq_dists(X, X[picked])[:, 0]
    for _ in range(1, n_clusters):
        if closest.sum() <= 0:
            # every point coincides with a center already; take the first unused row
            idx = next(i for i in range(n) if i not in picked)
        else:
            idx = int(sample_multinomial(rng, closest, 1, replacement=True)[0])
        picked.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return X[picked].copy()


def kmeans(feats, n_clusters: int, max_iter: int = 100, tol: float = 1e-8,
           rng: RngStream | None = None) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    Stops when the largest centroid shift is at most ``tol`` or after
    ``max_iter`` iterations. An emptied cluster is re-seeded at the point
    farthest from its current centroid.
    """
    X = feats.rows if isinstance(feats, FeatureMatrix) else check_inputs(feats, "features")
    n = X.shape[0]
    if isinstance(n_clusters, bool) or int(n_clusters) != n_clusters or n_clusters <= 0:
        raise ValueError(f"number of clusters must be a positive integer, got {n_clusters!r}")
    if n_clusters > n:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    check_count(max_iter, "max_iter")
    rng = rng or RngStream(0)

    centroids = _kmeanspp(X, n_clusters, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _sq_dists(X, centroids)
        assign = np.argmin(d, axis=1)
        history.append(_inertia(X, centroids, assign))
        new = centroids.copy()
        counts = np.bincount(assign, minlength=n_clusters)
        for c in range(n_clusters):
            if counts[c]:
                new[c] = X[assign == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            point_d = d[np.arange(n), assign]
            far = int(np.argmax(point_d))
            new[c] = X[far]
            assign[far] = c
            d[far] = 0.0
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift <= tol:
            break
    d = _sq_dists(X, centroids)
    assign = np.argmin(d, axis=1)
    inertia = _inertia(X, centroids, assign)
    history.append(inertia)
    return KMeansResult(centroids, assign, inertia, history, n_iter)


def _check_budget(k, groups, n):
    check_count(k, "k")
    if k * groups > n:
        raise CardinalityError(f"k*groups = {k * groups} exceeds the {n} available points")


def sample_random(n: int, size: int, rng: RngStream) -> SampleSet:
    check_count(size, "size")
    if size > n:
        raise CardinalityError(f"cannot draw {size} distinct points from {n}")
    idx = sample_multinomial(rng, np.ones(n), size, replacement=False)
    return SampleSet(idx, "random", rng.seed, (size,))


def sample_topk(feats, n_clusters: int, k: int, rng: RngStream, *,
                sampler: str = "topk", max_iter: int = 100) -> SampleSet:
    """``k`` nearest points to each K-means centroid, ``k*C`` distinct in total.

    Candidate (point, centroid) pairs are taken in order of increasing
    distance, ties by lowest point index then lowest centroid; a pair is
    accepted while its point is unclaimed and its centroid still has room.
    A point wanted by several centroids therefore goes to the nearest one
    and the others fill from their next candidates.
    """
    X = feats.rows if isinstance(feats, FeatureMatrix) else check_inputs(feats, "features")
    n = X.shape[0]
    _check_budget(k, n_clusters, n)
    km = kmeans(X, n_clusters, max_iter=max_iter, rng=rng)
    d = np.sqrt(_sq_dists(X, km.centroids))
    points, cents = np.meshgrid(np.arange(n), np.arange(n_clusters), indexing="ij")
    order = np.lexsort((cents.ravel(), points.ravel(), d.ravel()))
    taken = np.zeros(n, dtype=bool)
    fill = np.zeros(n_clusters, dtype=np.int64)
    chosen = [[] for _ in range(n_clusters)]
    remaining = k * n_clusters
    for flat in order:
        i, c = divmod(int(flat), n_clusters)
        if taken[i] or fill[c] >= k:
            continue
        taken[i] = True
        fill[c] += 1
        chosen[c].append(i)
        remaining -= 1
        if remaining == 0:
            break
    idx = np.array([i for group in chosen for i in group], dtype=np.int64)
    return SampleSet(idx, sampler, rng.seed, (k, n_clusters))


def distance_weights(distances, eps: float) -> np.ndarray:
    """Unnormalized weights ``1 / (d - (min(d) - eps))``."""
    eps = check_positive(eps, "eps")
    d = np.asarray(distances, dtype=np.float64)
    return 1.0 / (d - (d.min() - eps))


def _grouped_draws(weight_columns, k, rng):
    n, groups = weight_columns.shape
    taken = np.zeros(n, dtype=bool)
    out = []
    for g in range(groups):
        w = np.where(taken, 0.0, weight_columns[:, g])
        # conditioning on "not already drawn" is the same as rejecting and redrawing duplicates
        draw = sample_multinomial(rng, w, k, replacement=False)
        taken[draw] = True
        out.append(draw)
    return np.concatenate(out)


def sample_distance_weighted(feats, n_clusters: int, k: int, eps: float, rng: RngStream, *,
                             sampler: str = "distance", scope: str = "global",
                             max_iter: int = 100) -> SampleSet:
    """Per centroid, ``k`` draws without replacement weighted by distance.

    ``scope="global"`` weights all points for every centroid; ``"cluster"``
    restricts each centroid's weights to its own cluster members.
    """
    eps = check_positive(eps, "eps")
    if scope not in ("global", "cluster"):
        raise ValueError("scope must be 'global' or 'cluster'")
    X = feats.rows if isinstance(feats, FeatureMatrix) else check_inputs(feats, "features")
    n = X.shape[0]
    _check_budget(k, n_clusters, n)
    km = kmeans(X, n_clusters, max_iter=max_iter, rng=rng)
    d = np.sqrt(_sq_dists(X, km.centroids))
    W = np.empty_like(d)
    for c in range(n_clusters):
        if scope == "global":
            W[:, c] = distance_weights(d[:, c], eps)
        else:
            members = km.assignments == c
            W[:, c] = 0.0
            W[members, c] = distance_weights(d[members, c], eps)
    idx = _grouped_draws(W, k, rng)
    return SampleSet(idx, sampler, rng.seed, (k, n_clusters))


def sample_logit(scores, k: int, rng: RngStream, *, sampler: str = "logit") -> SampleSet:
    """Per class ``y``, ``k`` draws without replacement weighted by ``scores[:, y]``."""
    S = check_inputs(scores, "scores")
    if np.any(S < 0) or np.any(np.abs(S.sum(1) - 1.0) > 1e-9):
        raise ValueError("score rows must be nonnegative and sum to 1")
    n, n_classes = S.shape
    _check_budget(k, n_classes, n)
    idx = _grouped_draws(S, k, rng)
    return SampleSet(idx, sampler, rng.seed, (k, n_classes))


def read_feature_file(path) -> np.ndarray:
    """Parse ``n f`` header followed by ``n`` rows of ``f`` floats."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty feature file")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"{path}:1: header must be 'n f'")
    n, f = (int(t) for t in header)
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: header declares {n} rows, found {len(lines) - 1}")
    rows = np.empty((n, f))
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != f:
            raise ValueError(f"{path}:{i + 2}: expected {f} columns, found {len(parts)}")
        rows[i] = [float(t) for t in parts]
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"{path}: non-finite feature values")
    return rows


def write_feature_file(path, rows) -> None:
    rows = check_inputs(rows, "features")
    body = "\n".join(" ".join(repr(float(x)) for x in r) for r in rows)
    Path(path).write_text(f"{rows.shape[0]} {rows.shape[1]}\n{body}\n")


def extract_features(mode: str, ds, spec=None, theta=None, feature_file=None) -> FeatureMatrix:
    if mode == "intrinsic":
        if spec is None or theta is None:
            raise ValueError("intrinsic features need a model spec and parameters")
        return FeatureMatrix(penultimate_features(spec, theta, ds.inputs), "intrinsic")
    if mode == "extrinsic":
        if feature_file is None:
            raise ValueError("extrinsic features need a feature file or array")
        rows = (read_feature_file(feature_file) if isinstance(feature_file, (str, Path))
                else check_inputs(feature_file, "features"))
        if rows.shape[0] != len(ds):
            raise ValueError(f"feature rows ({rows.shape[0]}) do not match dataset size ({len(ds)})")
        return FeatureMatrix(rows, "extrinsic")
    if mode == "raw":
        return FeatureMatrix(ds.inputs.copy(), "raw")
    raise ValueError(f"unknown feature mode {mode!r}")


# -- estimators ------------------------------------------------------------

class KMeans(BaseEstimator):
    def __init__(self, n_clusters=8, max_iter=100, tol=1e-8, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        res = kmeans(check_inputs(X), self.n_clusters, self.max_iter, self.tol,
                     RngStream.derive(self.random_state or 0, "kmeans"))
        self.cluster_centers_ = res.centroids
        self.labels_ = res.assignments
        self.inertia_ = res.inertia
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.argmin(_sq_dists(check_inputs(X), self.cluster_centers_), axis=1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.sqrt(_sq_dists(check_inputs(X), self.cluster_centers_))


class _SamplerBase(BaseEstimator):
    """``fit(X)`` selects rows of ``X``; the result is in ``sample_indices_``."""

    def _rng(self):
        return RngStream.derive(self.random_state or 0, type(self).__name__)

    def fit_sample(self, X, y=None):
        return self.fit(X, y).sample_indices_

    def _store(self, sample):
        self.sample_ = sample
        self.sample_indices_ = sample.indices
        return self


class RandomSampler(_SamplerBase):
    def __init__(self, n_samples=100, random_state=0):
        self.n_samples = n_samples
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_inputs(X)
        return self._store(sample_random(X.shape[0], self.n_samples, self._rng()))


class TopKSampler(_SamplerBase):
    def __init__(self, n_clusters=10, k=10, random_state=0):
        self.n_clusters = n_clusters
        self.k = k
        self.random_state = random_state

    def fit(self, X, y=None):
        return self._store(sample_topk(check_inputs(X), self.n_clusters, self.k, self._rng()))


class DistanceWeightedSampler(_SamplerBase):
    def __init__(self, n_clusters=10, k=10, eps=0.1, scope="global", random_state=0):
        self.n_clusters = n_clusters
        self.k = k
        self.eps = eps
        self.scope = scope
        self.random_state = random_state

    def fit(self, X, y=None):
        return self._store(sample_distance_weighted(
            check_inputs(X), self.n_clusters, self.k, self.eps, self._rng(), scope=self.scope))


class LogitSampler(_SamplerBase):
    """``X`` is the ``n x Y`` table of softmax scores (e.g. ``predict_proba``)."""

    def __init__(self, k=10, random_state=0):
        self.k = k
        self.random_state = random_state

    def fit(self, X, y=None):
        return self._store(sample_logit(X, self.k, self._rng()))
