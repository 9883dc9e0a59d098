"""Input validation helpers for the estimator layer."""

from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a (N, channels, H, W) image array; returns float32 in [0, 1].

    uint8 input is rescaled by 1/255; float input must already lie in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"{name} must be 4-d (N, channels, H, W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if X.dtype == np.uint8:
        return X.astype(np.float32) / 255.0
    X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} float pixels must lie in [0, 1]")
    return X


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Validate integer labels 0..C-1 covering every class up to max(y)."""
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"{name} must have shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError(f"{name} must be integer class labels")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError(f"{name} contains negative labels")
    counts = np.bincount(y)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0)
        raise ValueError(f"{name} has empty classes {missing.tolist()}")
    return y


def check_soft_labels(soft, n_samples: int, num_classes: int) -> np.ndarray:
    soft = np.asarray(soft, dtype=np.float32)
    if soft.shape != (n_samples, num_classes):
        raise ValueError(
            f"soft labels must have shape ({n_samples}, {num_classes}), got {soft.shape}"
        )
    if np.abs(soft.sum(axis=1) - 1.0).max() > 1e-5:
        raise ValueError("soft label rows must sum to 1")
    return soft
