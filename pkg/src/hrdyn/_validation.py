"""Small input-validation helpers used across modules."""

import numpy as np

from .exceptions import ConfigurationError, InputError


def as_1d_float(x, name="x", min_length=1):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.shape[0] < min_length:
        raise InputError(f"{name} needs at least {min_length} values, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def as_2d_float(x, name="x", min_length=1):
    """Coerce to (n, d); a 1-D input becomes a single column."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InputError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[0] < min_length:
        raise InputError(f"{name} needs at least {min_length} rows, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name):
    if not (np.isfinite(value) and value > 0):
        raise ConfigurationError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_integral(value, name, tol=1e-9):
    """Return ``round(value)`` if ``value`` is an integer within ``tol``."""
    rounded = int(round(value))
    if abs(value - rounded) > tol * max(1.0, abs(value)):
        raise ConfigurationError(f"{name} must be an integer number of samples, got {value!r}")
    return rounded
