"""Small input-validation helpers used across modules."""

import numpy as np

from .errors import DimensionMismatch


def as_vector(x, name="vector"):
    """Coerce to a 1-D float64 array, raising DimensionMismatch otherwise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(x, name="matrix"):
    """Coerce to a 2-D float64 array, raising DimensionMismatch otherwise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_square(m, name="matrix"):
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {m.shape}")


def check_symmetric(m, tol=1e-10, name="matrix"):
    if m.size and np.max(np.abs(m - m.T)) > tol:
        raise DimensionMismatch(f"{name} is not symmetric within {tol}")
