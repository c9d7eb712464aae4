"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .numeric import ShapeError


def check_volumes(X, n_channels: int | None = None) -> np.ndarray:
    """``(N, C, H, W, D)`` finite float32 array; a single ``(C, H, W, D)`` volume is promoted."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5:
        raise ShapeError("volumes must be (N, C, H, W, D)", X.shape, ("N", "C", "H", "W", "D"))
    if len(X) == 0:
        raise ValueError("empty volume batch")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ShapeError("channel count", X.shape, ("N", n_channels, "H", "W", "D"))
    if not np.isfinite(X).all():
        raise ValueError("volumes contain non-finite values")
    return np.ascontiguousarray(X)


def check_masks(y, volumes: np.ndarray) -> np.ndarray:
    """Binary ``(N, H, W, D)`` masks aligned with ``volumes``."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[None]
    expected = (volumes.shape[0], *volumes.shape[2:])
    if y.shape != expected:
        raise ShapeError("masks must align with volumes", y.shape, expected)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary")
    return y.astype(np.int64)
