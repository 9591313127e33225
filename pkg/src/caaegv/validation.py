"""Input checks shared by the estimators (in the spirit of sklearn's check_array)."""

from __future__ import annotations

import numpy as np

from .dataset import N_GROUPS, SEXES
from .exceptions import BadChannels, ShapeMismatch


def check_images(X, image_size: int | None = None, allow_single: bool = False) -> np.ndarray:
    """Return ``X`` as a float32 N x H x W x 3 array with values in [-1, 1]."""
    X = np.asarray(X)
    if allow_single and X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeMismatch(f"expected N x H x W x 3 images, got shape {X.shape}")
    if X.shape[-1] != 3:
        raise BadChannels(f"expected 3 channels, got {X.shape[-1]}")
    if X.shape[1] != X.shape[2]:
        raise ShapeMismatch(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_size is not None and X.shape[1] != image_size:
        raise ShapeMismatch(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.size and (X.min() < -1.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [-1, 1]")
    return X


def check_sexes(sexes, n: int | None = None) -> np.ndarray:
    """Accept 0/1 indices or 'male'/'female' strings; return int64 indices."""
    arr = np.asarray(sexes).reshape(-1)
    if arr.dtype.kind in "USO":
        try:
            arr = np.array([SEXES.index(str(s)) for s in arr], dtype=np.int64)
        except ValueError as exc:
            raise ValueError(f"unknown sex label in {sexes!r}") from exc
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("sex indices must be 0 (male) or 1 (female)")
    if n is not None and arr.shape[0] != n:
        raise ShapeMismatch(f"expected {n} sex labels, got {arr.shape[0]}")
    return arr


def check_groups(groups, n: int | None = None) -> np.ndarray:
    arr = np.asarray(groups).reshape(-1).astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= N_GROUPS):
        raise ValueError(f"age groups must lie in [0, {N_GROUPS - 1}]")
    if n is not None and arr.shape[0] != n:
        raise ShapeMismatch(f"expected {n} age groups, got {arr.shape[0]}")
    return arr


def check_labels(y, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Split an ``(n, 2)`` label array of (age group, sex) into two index arrays."""
    y = np.asarray(y)
    if y.ndim != 2 or y.shape != (n, 2):
        raise ShapeMismatch(f"labels must have shape ({n}, 2) of (age group, sex), got {y.shape}")
    return check_groups(y[:, 0], n), check_sexes(y[:, 1], n)
