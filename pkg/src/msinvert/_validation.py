"""Small input-validation helpers shared by the public API."""

from __future__ import annotations

import numpy as np


def check_positive(name: str, value) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def check_count(name: str, value, minimum: int = 1) -> int:
    ivalue = int(value)
    if ivalue != value or ivalue < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value}")
    return ivalue


def check_parameter_array(x, n_features: int, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float array with the expected feature count."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n_features:
        raise ValueError(
            f"{name} must have shape (n_samples, {n_features}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr
