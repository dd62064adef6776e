"""Input validation helpers shared by the estimators and functional cores."""

import numbers

import numpy as np
from sklearn.utils import check_array


class InvalidInputError(ValueError):
    """Raised when an argument has the wrong shape, range or type."""


def check_vector(x, dim=None, name="x"):
    """Return ``x`` as a finite 1-D float array, optionally of length ``dim``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be a vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InvalidInputError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_batch(X, dim=None, name="X"):
    """Return ``X`` as a finite 2-D float array with ``dim`` columns."""
    try:
        arr = check_array(X, dtype=np.float64, ensure_2d=True, input_name=name)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from exc
    if dim is not None and arr.shape[1] != dim:
        raise InvalidInputError(f"{name} has {arr.shape[1]} features, expected {dim}")
    return arr


def check_targets(y, n, name="y"):
    arr = np.asarray(y, dtype=float).reshape(-1)
    if arr.shape[0] != n:
        raise InvalidInputError(f"{name} has {arr.shape[0]} entries, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name, integer=False):
    if integer:
        if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
            raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
        return int(value)
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise InvalidInputError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_open_unit(value, name):
    if not isinstance(value, numbers.Real) or not 0.0 < value < 1.0:
        raise InvalidInputError(f"{name} must lie in (0, 1), got {value!r}")
    return float(value)
