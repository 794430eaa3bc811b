"""Input validation helpers used across the package.

All helpers raise :class:`memtalk.errors.ArgumentError` with the offending
argument named, so call sites stay one-liners.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, NumericError


def check_array(name: str, value, *, shape=None, ndim=None, finite=False) -> np.ndarray:
    """Coerce ``value`` to an ndarray and validate its geometry.

    ``shape`` may contain ``None`` entries for free axes.
    """
    arr = np.asarray(value)
    if ndim is not None and arr.ndim != ndim:
        raise ArgumentError(f"{name}: expected {ndim} dims, got {arr.ndim}")
    if shape is not None:
        if arr.ndim != len(shape):
            raise ArgumentError(
                f"{name}: expected shape {shape}, got {arr.shape}"
            )
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ArgumentError(
                    f"{name}: expected shape {shape}, got {arr.shape}"
                )
    if finite and arr.size and not np.isfinite(arr).all():
        raise NumericError(f"{name}: contains non-finite values")
    return arr


def check_positive(name: str, value) -> None:
    if value <= 0:
        raise ArgumentError(f"{name}: must be positive, got {value}")


def check_count(name: str, value, minimum: int = 1) -> int:
    if int(value) != value or value < minimum:
        raise ArgumentError(f"{name}: must be an integer >= {minimum}, got {value}")
    return int(value)


def check_same_shape(name_a: str, a, name_b: str, b) -> None:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ArgumentError(
            f"{name_a} and {name_b} must share a shape, got {a.shape} vs {b.shape}"
        )
