"""Input validation helpers, sklearn check_array style but for pixel fields."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")


def as_field_array(data, name: str, ndim: int) -> np.ndarray:
    """Coerce to a float64 array of the given rank and verify finiteness."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_same_spatial_shape(a, b, name_a: str, name_b: str) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ValidationError(
            f"{name_a} shape ({a.height}, {a.width}) does not match "
            f"{name_b} shape ({b.height}, {b.width})"
        )


def check_range(arr: np.ndarray, lo: float, hi: float, name: str, atol: float = 0.0) -> None:
    if arr.size and (arr.min() < lo - atol or arr.max() > hi + atol):
        raise ValidationError(f"{name} values must lie in [{lo}, {hi}]")


def check_unit_interval(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value
