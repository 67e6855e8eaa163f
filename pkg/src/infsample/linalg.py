"""Dense float64 kernels, keyed random streams and multinomial sampling.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
Every function returns a new array and never mutates its inputs.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np
from scipy.linalg import blas, lapack

__all__ = [
    "DimensionError",
    "FactorizationError",
    "DegenerateDistributionError",
    "CardinalityError",
    "RngStream",
    "as_vector",
    "dot",
    "axpy",
    "norm2",
    "solve_spd",
    "sample_multinomial",
]

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(
            f"matrix is not positive definite after damping: pivot {pivot} "
            "is non-positive"
        )


class DegenerateDistributionError(ValueError):
    """All sampling weights are zero."""


class CardinalityError(ValueError):
    """More distinct draws were requested than the support allows."""


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_same_len(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    a, b = as_vector(a, "a"), as_vector(b, "b")
    _check_same_len(a, b)
    return float(a @ b)


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` as a new vector."""
    x, y = as_vector(x, "x"), as_vector(y, "y")
    _check_same_len(x, y)
    return alpha * x + y


def norm2(v) -> float:
    # BLAS nrm2 rescales while accumulating, so subnormal or huge entries neither
    # underflow to 0 nor overflow
    v = np.ascontiguousarray(v, dtype=np.float64).ravel()
    return float(blas.dnrm2(v)) if v.size else 0.0


def solve_spd(A, b, damping: float = 0.0) -> np.ndarray:
    """Solve ``(A + damping*I) x = b`` by Cholesky factorization.

    Intended as a small-p verification path, not a scalable solver.
    Raises :class:`FactorizationError` carrying the zero-based index of the
    first non-positive pivot when the damped matrix is not positive definite.
    """
    A = np.asarray(A, dtype=np.float64)
    b = as_vector(b, "b")
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"A must be square, got shape {A.shape}")
    if A.shape[0] != b.shape[0]:
        raise DimensionError(f"A has {A.shape[0]} rows but b has length {b.shape[0]}")
    if damping < 0:
        raise ValueError("damping must be >= 0")
    scale = max(np.abs(A).max(initial=0.0), 1.0)
    if np.abs(A - A.T).max(initial=0.0) > 1e-9 * scale:
        raise ValueError("A is not symmetric")
    M = A + damping * np.eye(A.shape[0])
    chol, info = lapack.dpotrf(M, lower=True, clean=True)
    if info > 0:
        raise FactorizationError(info - 1)
    if info < 0:
        raise ValueError(f"illegal argument {-info} passed to dpotrf")
    x, info = lapack.dpotrs(chol, b, lower=True)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x


def _label_bytes(label) -> bytes:
    if isinstance(label, bool):
        return b"b" + bytes([label])
    if isinstance(label, (int, np.integer)):
        return b"i" + str(int(label)).encode()
    if isinstance(label, float):
        return b"f" + struct.pack("<d", label)
    return b"s" + str(label).encode()


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so the same key replays the same draws on any platform
    and streams with different ids share no state.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def derive(cls, seed: int, *labels) -> "RngStream":
        """Stream whose id is a stable hash of ``labels``.

        Hierarchical keys such as ``(sampler, count, repetition)`` map to
        independent streams without any coordination between callers.
        """
        h = hashlib.sha256()
        for label in labels:
            part = _label_bytes(label)
            h.update(struct.pack("<I", len(part)))
            h.update(part)
        stream_id = int.from_bytes(h.digest()[:8], "little")
        return cls(seed, stream_id)

    def spawn(self, *labels) -> "RngStream":
        return RngStream.derive(self.seed, self.stream_id, *labels)

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def sample_multinomial(rng: RngStream, weights, k: int, replacement: bool) -> np.ndarray:
    """Draw ``k`` indices with probability proportional to ``weights``.

    Without replacement the draws follow successive sampling (draw, remove,
    renormalize), realized with exponential race keys; the returned order is
    the draw order.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise DimensionError("weights must be 1-D")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    k = int(k)
    if k < 0:
        raise ValueError("k must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegenerateDistributionError("all weights are zero")
    if replacement:
        return rng.generator.choice(w.shape[0], size=k, replace=True, p=w / total)
    support = np.flatnonzero(w > 0)
    if k > support.size:
        raise CardinalityError(
            f"cannot draw {k} distinct indices from {support.size} positive weights"
        )
    # log-space race keys: E/w overflows for subnormal weights
    keys = np.log(rng.generator.standard_exponential(support.size)) - np.log(w[support])
    order = np.argsort(keys, kind="stable")[:k]
    return support[order]
