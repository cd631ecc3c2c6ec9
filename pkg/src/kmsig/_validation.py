"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_snapshots(X, min_steps=2, name="X"):
    """Validate a time-major snapshot array of shape (n_steps, n_sensors).

    A 1-d input is read as a single sensor.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name,
                    ensure_min_samples=1)
    if X.shape[0] < min_steps:
        raise ValueError(
            f"{name} needs at least {min_steps} time steps, got {X.shape[0]}"
        )
    return X


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive_float(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if value < 0 or (strict and value == 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return float(value)


def check_nonnegative(V, name="V"):
    V = check_array(V, dtype=np.float64, ensure_all_finite=True, input_name=name,
                    ensure_min_samples=1)
    if np.any(V < 0):
        raise ValueError(f"{name} must be non-negative")
    return V


def check_pmf(p, name="pmf", atol=1e-9):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{name} must be finite and non-negative")
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1, sums to {total!r}")
    return p
