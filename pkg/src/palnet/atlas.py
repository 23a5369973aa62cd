"""Landmark sets, the population-mean template and its projection onto a surface."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, SpatialIndex


class LandmarkSchemaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    names: tuple
    coords: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3)
        if len(set(names)) != len(names):
            raise LandmarkSchemaError("landmark names must be unique")
        if len(names) != len(coords):
            raise LandmarkSchemaError(f"{len(names)} names but {len(coords)} coordinates")
        if not np.all(np.isfinite(coords)):
            raise LandmarkSchemaError("landmark coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "coords", coords)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name):
        return self.coords[self.names.index(name)]

    def with_coords(self, coords):
        return LandmarkSet(self.names, coords)

    def subset(self, names):
        idx = [self.names.index(n) for n in names]
        return LandmarkSet(tuple(names), self.coords[idx])


def mean_template(training_sets) -> LandmarkSet:
    """Coordinate-wise mean of landmark sets sharing names and order."""
    sets = list(training_sets)
    if not sets:
        raise LandmarkSchemaError("need at least one landmark set")
    names = sets[0].names
    for s in sets[1:]:
        if s.names != names:
            raise LandmarkSchemaError("landmark sets disagree on names or order")
    total = np.zeros_like(sets[0].coords)
    for s in sets:  # fixed summation order
        total = total + s.coords
    return LandmarkSet(names, total / len(sets))


def project_to_surface(template: LandmarkSet, cloud) -> LandmarkSet:
    """Replace every landmark by its nearest cloud vertex."""
    index = cloud if isinstance(cloud, SpatialIndex) else SpatialIndex(
        cloud.points if isinstance(cloud, PointCloud) else cloud)
    idx = index.nearest(template.coords)
    return template.with_coords(index.points[idx])


def read_landmarks(path) -> LandmarkSet:
    path = os.fspath(path)
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        items = data["landmarks"] if isinstance(data, dict) else data
        return LandmarkSet([d["name"] for d in items], [[d["x"], d["y"], d["z"]] for d in items])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["name", "x", "y", "z"]:
            raise LandmarkSchemaError(f"{path}: expected header name,x,y,z")
        rows = list(reader)
    return LandmarkSet([r["name"] for r in rows],
                       [[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])


def write_landmarks(path, landmarks: LandmarkSet):
    path = os.fspath(path)
    if path.endswith(".json"):
        items = [{"name": n, "x": float(c[0]), "y": float(c[1]), "z": float(c[2])}
                 for n, c in zip(landmarks.names, landmarks.coords)]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"landmarks": items}, fh, indent=1)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "x", "y", "z"])
        for n, c in zip(landmarks.names, landmarks.coords):
            w.writerow([n] + [repr(float(v)) for v in c])
