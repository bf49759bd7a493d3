"""Shared input-validation helpers."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def as_matrix(x, name: str = "array", dtype=np.float64) -> np.ndarray:
    """Coerce to a 2-D float array, rejecting non-finite values."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be non-empty, got shape {arr.shape}")
    require_finite(arr, name)
    return arr


def as_vector(x, name: str = "array", dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    require_finite(arr, name)
    return arr


def require_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"non-finite value in {name}")


def require_labels(labels, n: int, num_classes: int, name: str = "labels") -> np.ndarray:
    """Validate an integer label vector of length ``n`` with values in [0, num_classes)."""
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValidationError(f"{name} must be 1-D of length {n}, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ValidationError(f"{name} must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValidationError(
            f"{name} values must lie in [0, {num_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr.astype(np.int32)
