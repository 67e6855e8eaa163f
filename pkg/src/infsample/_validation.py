"""Input validation helpers shared by the estimators and the functional core."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array, check_X_y


def check_inputs(X, name: str = "X") -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)


def check_labeled(X, y):
    X, y = check_X_y(X, y, dtype=np.float64, ensure_all_finite=True, y_numeric=False)
    return X, y


def check_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be 1-D")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        as_int = y.astype(np.int64)
        if not np.array_equal(as_int, y):
            raise ValueError("labels must be integers")
        y = as_int
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def check_positive(value, name: str, *, strict: bool = True) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_count(value, name: str, *, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)
