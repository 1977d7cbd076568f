"""Input checks for the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d


def check_images(X, n_channels: int = 3, dtype=np.float32) -> np.ndarray:
    """Validate a stack of images shaped (n_samples, C, H, W)."""
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=dtype, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n_samples, {n_channels}, H, W), got {X.shape}")
    if X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[1]}")
    return X


def check_identities(y, n_samples: int) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    if len(y) != n_samples:
        raise ValueError(f"{len(y)} labels for {n_samples} images")
    return np.asarray(y, dtype=np.int64)


def check_cameras(cameras, n_samples: int) -> np.ndarray:
    if cameras is None:
        return np.ones(n_samples, dtype=np.int64)
    cameras = np.asarray(column_or_1d(cameras), dtype=np.int64)
    if len(cameras) != n_samples:
        raise ValueError(f"{len(cameras)} camera ids for {n_samples} images")
    return cameras
