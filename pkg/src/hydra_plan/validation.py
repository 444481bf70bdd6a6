"""Input validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def as_float_array(value, name, shape=None, ndim=None):
    """Coerce to a float64 array and optionally check its shape/rank."""
    arr = np.asarray(value, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ConfigurationError(f"{name}: expected {ndim} dims, got {arr.ndim}")
    if shape is not None:
        expected = tuple(shape)
        got = arr.shape
        if len(expected) != len(got) or any(
            e is not None and e != g for e, g in zip(expected, got)
        ):
            raise ConfigurationError(f"{name}: expected shape {expected}, got {got}")
    return arr


def ensure_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def ensure_unit_interval(arr, name, tol=0.0):
    arr = np.asarray(arr, dtype=float)
    if np.any(arr < -tol) or np.any(arr > 1.0 + tol):
        raise ConfigurationError(f"{name} has values outside [0, 1]")
    return arr


def ensure_probability_vector(vec, name, tol=1e-6):
    vec = as_float_array(vec, name, ndim=1)
    if np.any(vec < 0.0):
        raise ConfigurationError(f"{name} has negative entries")
    total = float(vec.sum())
    if abs(total - 1.0) > tol:
        raise ConfigurationError(f"{name} sums to {total}, expected 1")
    return vec


def ensure_positive(value, name):
    if not value > 0:
        raise ConfigurationError(f"{name} must be positive, got {value}")
    return value
