"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np

from .atlas import LandmarkSchemaError, LandmarkSet
from .geometry import Mesh, PointCloud
from .patching import PatchTensor


def check_patches(x, k=None, dtype=np.float32):
    """Return a finite (m, n, K, 3) array from a PatchTensor or array-like."""
    data = x.data if isinstance(x, PatchTensor) else x
    arr = np.asarray(data)
    if arr.dtype == object:
        raise TypeError("patch input must be numeric")
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected patches of shape (m, n, K, 3), got {arr.shape}")
    if min(arr.shape) == 0:
        raise ValueError("patch input is empty")
    if k is not None and arr.shape[2] != k:
        raise ValueError(f"expected K={k} points per patch, got {arr.shape[2]}")
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("patch input contains NaN or inf")
    return arr


def check_landmarks(y, n_landmarks=None):
    """Return (m, n, 3) float64 coordinates and the schema names (or None)."""
    names = None
    if isinstance(y, LandmarkSet):
        y = [y]
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], LandmarkSet):
        names = y[0].names
        if any(s.names != names for s in y):
            raise LandmarkSchemaError("landmark sets disagree on names or order")
        arr = np.stack([s.coords for s in y])
    else:
        arr = np.asarray(y, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected landmarks of shape (m, n, 3), got {arr.shape}")
    if n_landmarks is not None and arr.shape[1] != n_landmarks:
        raise ValueError(f"expected {n_landmarks} landmarks, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("landmark coordinates contain NaN or inf")
    return arr, names


def check_consistent_subjects(x, y):
    if len(x) != len(y):
        raise ValueError(f"{len(x)} patch subjects but {len(y)} landmark subjects")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"patches cover {x.shape[1]} landmarks but targets have {y.shape[1]}")


def as_cloud(obj) -> PointCloud:
    """PointCloud from a Mesh, PointCloud or (n, 3) array."""
    if isinstance(obj, PointCloud):
        return obj
    if isinstance(obj, Mesh):
        return obj.to_cloud()
    return PointCloud(np.asarray(obj, dtype=np.float64))

