"""Input validation helpers shared across the toolkit.

All public entry points funnel array inputs through :func:`as_matrix` so the
numerical core can assume dense, C-contiguous, finite float64 data.
"""

from __future__ import annotations

import numpy as np

__all__ = ["as_matrix", "as_vector", "check_same_shape", "ValidationError"]


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def as_matrix(a, name: str = "array", *, allow_empty: bool = False) -> np.ndarray:
    """Coerce ``a`` to a finite, C-contiguous float64 2-D array.

    Raises ValidationError if the input is not 2-D or contains NaN/Inf.
    """
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ValidationError(f"{name} must be non-empty")
    if arr.size and not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def as_vector(a, name: str = "vector", *, positive: bool = False) -> np.ndarray:
    """Coerce ``a`` to a finite float64 1-D array, optionally strictly positive."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    if positive and arr.size and not (arr > 0).all():
        raise ValidationError(f"{name} must be strictly positive")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")
