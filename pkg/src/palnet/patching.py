"""Per-landmark local patches, ordered by distance to a fixed origin."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, PointCloud, SpatialIndex


class EmptyPatchError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class PatchTensor:
    data: np.ndarray  # (m, n, K, 3)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    strategy: str = "knn"
    k: int = 1000
    radius: float | None = None
    seed: int = 0
    ordered: bool = True

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[3] != 3:
            raise ValueError(f"patch tensor must be (m, n, K, 3), got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))

    @property
    def shape(self):
        return self.data.shape

    def subjects(self, idx):
        return PatchTensor(self.data[idx], self.origin, self.strategy, self.k,
                           self.radius, self.seed, self.ordered)

    def meta(self):
        return {"shape": list(self.data.shape), "dtype": "<f4", "strategy": self.strategy,
                "k": self.k, "radius": self.radius, "origin": self.origin.tolist(),
                "seed": self.seed, "ordered": self.ordered}

    def save(self, path):
        """Raw little-endian float32 blob at ``path`` plus ``path + '.json'`` sidecar."""
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(self.data, dtype="<f4").tobytes())
        with open(os.fspath(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.meta(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(os.fspath(path) + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
        data = np.fromfile(path, dtype=meta.get("dtype", "<f4")).reshape(meta["shape"])
        return cls(data, meta["origin"], meta["strategy"], meta["k"], meta["radius"],
                   meta["seed"], meta["ordered"])


def _index(cloud):
    if isinstance(cloud, SpatialIndex):
        return cloud
    return SpatialIndex(cloud.points if isinstance(cloud, PointCloud) else cloud)


def extract_knn_patch(cloud, center, k: int) -> np.ndarray:
    index = _index(cloud)
    idx, _ = index.knn(center, k)
    return index.points[idx]


def extract_radius_patch(cloud, center, radius: float, k: int, seed=0, name=None) -> np.ndarray:
    """Points within ``radius`` resampled to exactly ``k`` rows.

    With at least ``k`` hits, ``k`` are drawn without replacement; with fewer,
    draws are with replacement. Exactly ``k`` hits are returned unchanged.
    """
    index = _index(cloud)
    idx, _ = index.radius(center, radius)
    if len(idx) == 0:
        label = f" for landmark {name}" if name is not None else ""
        raise EmptyPatchError(f"no points within {radius} mm{label}")
    if len(idx) == k:
        return index.points[idx]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(idx), size=k, replace=len(idx) < k)
    return index.points[idx[np.sort(pick)]]


def order_patch(patch, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Stable sort of patch rows by Euclidean distance to ``origin``."""
    p = np.asarray(patch)
    d = np.linalg.norm(p - np.asarray(origin, dtype=p.dtype), axis=1)
    return p[np.argsort(d, kind="stable")]


def build_patch_tensor(subjects, strategy="knn", k=1000, radius=None, origin=(0.0, 0.0, 0.0),
                       seed=0, ordered=True, names=None, dtype=np.float32) -> PatchTensor:
    """Stack ordered patches for ``subjects``: a sequence of (cloud, centres (n, 3)).

    With ``ordered=False`` each patch gets a seeded random permutation instead of
    the distance ordering (the no-spatial-ordering ablation).
    """
    subjects = list(subjects)
    if not subjects:
        raise ValueError("no subjects to patch")
    n_l = len(np.asarray(getattr(subjects[0][1], "coords", subjects[0][1])).reshape(-1, 3))
    out = np.empty((len(subjects), n_l, k, 3), dtype=dtype)
    for i, (cloud, centers) in enumerate(subjects):
        centers = np.asarray(getattr(centers, "coords", centers), dtype=np.float64).reshape(-1, 3)
        if len(centers) != n_l:
            raise ValueError(f"subject {i} has {len(centers)} landmarks, expected {n_l}")
        index = _index(cloud)
        for j, c in enumerate(centers):
            rng_seed = [seed, i, j]
            label = names[j] if names is not None else j
            try:
                if strategy == "knn":
                    patch = extract_knn_patch(index, c, k)
                elif strategy == "radius":
                    patch = extract_radius_patch(index, c, radius, k, rng_seed, name=label)
                else:
                    raise ValueError(f"unknown patch strategy {strategy!r}")
            except GeometryError as exc:
                raise type(exc)(f"subject {i}, landmark {label}: {exc}") from exc
            # order the stored (cast) values so the invariant holds on the tensor itself
            patch = patch.astype(dtype).astype(np.float64)
            if ordered:
                patch = order_patch(patch, origin)
            else:
                patch = patch[np.random.default_rng(rng_seed + [1]).permutation(k)]
            out[i, j] = patch
    return PatchTensor(out, origin, strategy, k, radius, seed, ordered)
