"""Point-cloud and mesh primitives.

All coordinates are millimetres. Spatial queries go through :class:`SpatialIndex`,
a thin layer over ``scipy.spatial.cKDTree`` that adds deterministic tie-breaking.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


class EmptyROIError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    # False where the normal could not be estimated (degenerate neighbourhood)
    normals_valid: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise GeometryError(f"points must be (n>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise GeometryError("normals must match points in shape")
            valid = (np.ones(len(pts), bool) if self.normals_valid is None
                     else np.asarray(self.normals_valid, dtype=bool))
            lengths = np.linalg.norm(nrm[valid], axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise GeometryError("normals must have unit length")
            nrm.setflags(write=False)
            valid.setflags(write=False)
            object.__setattr__(self, "normals", nrm)
            object.__setattr__(self, "normals_valid", valid)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 1:
            raise GeometryError(f"vertices must be (n>=1, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("vertex coordinates must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError(
                f"face index out of range: vertices={len(v)}, max index={f.max()}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        areas = triangle_areas(v, f)
        areas.setflags(write=False)
        object.__setattr__(self, "face_areas", areas)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def to_cloud(self) -> PointCloud:
        return PointCloud(self.vertices)


def triangle_areas(vertices, faces):
    if len(faces) == 0:
        return np.zeros(0)
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class BoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise GeometryError("bounding box min corner exceeds max corner")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.min_corner) & (p <= self.max_corner), axis=1)

    def to_dict(self):
        return {"min": self.min_corner.tolist(), "max": self.max_corner.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["min"], d["max"])


class RigidTransform:
    """Element of SE(3) stored as a 4x4 homogeneous matrix."""

    __slots__ = ("matrix",)

    def __init__(self, matrix=None, *, check=True):
        m = np.eye(4) if matrix is None else np.array(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"rigid transform must be 4x4, got {m.shape}")
        if check:
            r = m[:3, :3]
            if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0):
                raise GeometryError("rotation block is not orthonormal")
            if abs(np.linalg.det(r) - 1.0) > 1e-9:
                raise GeometryError("rotation block must have determinant +1")
            if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
                raise GeometryError("last row must be (0, 0, 0, 1)")
        m.setflags(write=False)
        self.matrix = m

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, rotation, translation=(0.0, 0.0, 0.0)):
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def from_translation(cls, t):
        return cls.from_rt(np.eye(3), t)

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)):
        return cls.from_rt(axis_angle_matrix(axis, angle), translation)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        r = self.rotation
        return RigidTransform.from_rt(r.T, -r.T @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotation_angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    def tolist(self):
        return self.matrix.tolist()

    def __repr__(self):
        return f"RigidTransform({self.matrix.tolist()})"


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def orthonormalize(rotation):
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def compose(second: RigidTransform, first: RigidTransform) -> RigidTransform:
    """Matrix product ``second @ first``: apply ``first``, then ``second``."""
    m = second.matrix @ first.matrix
    r = m[:3, :3]
    if (not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0)
            or abs(np.linalg.det(r) - 1.0) > 1e-9):
        m[:3, :3] = orthonormalize(r)
    m[3] = (0.0, 0.0, 0.0, 1.0)
    return RigidTransform(m)


def apply_transform(cloud, transform: RigidTransform):
    """Rigidly move a PointCloud (normals rotate along) or a Mesh."""
    if isinstance(cloud, Mesh):
        return Mesh(transform.apply(cloud.vertices), cloud.faces)
    if not isinstance(cloud, PointCloud):
        return transform.apply(cloud)
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ transform.rotation.T
        valid = cloud.normals_valid
        # renormalise against rounding so the unit-length invariant holds
        normals[valid] /= np.linalg.norm(normals[valid], axis=1, keepdims=True)
    return PointCloud(transform.apply(cloud.points), normals, cloud.normals_valid)


def crop_roi(cloud: PointCloud, box: BoundingBox) -> PointCloud:
    inside = box.contains(cloud.points)
    if not inside.any():
        raise EmptyROIError("no points inside the region-of-interest box")
    normals = None if cloud.normals is None else cloud.normals[inside]
    valid = None if cloud.normals_valid is None else cloud.normals_valid[inside]
    return PointCloud(cloud.points[inside], normals, valid)


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform sampling of ``n`` points on the mesh triangles."""
    if n < 1:
        raise GeometryError("sample count must be >= 1")
    total = mesh.face_areas.sum()
    if not total > 0:
        raise GeometryError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(mesh.faces), size=n, p=mesh.face_areas / total)
    bary = _random_barycentric(rng, n)
    tri = mesh.vertices[mesh.faces[face_idx]]
    return PointCloud(np.einsum("ni,nij->nj", bary, tri))


def _random_barycentric(rng, n):
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    return np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)


class SpatialIndex:
    """KD-tree over a fixed point set with exact, index-ordered tie-breaking."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn(self, query, k: int):
        """Indices and distances of the ``k`` nearest points, sorted by (distance, index)."""
        n = len(self.points)
        if k > n or k < 1:
            raise GeometryError(f"k={k} must be in [1, {n}]")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        dist, idx = self.tree.query(q, k=k)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        # gather every point tied with the k-th distance so the cut is exact
        ties = self.tree.query_ball_point(q, dist[-1] * (1 + 1e-12) + 1e-300)
        if len(ties) > k:
            idx = np.asarray(ties, dtype=np.int64)
            dist = np.linalg.norm(self.points[idx] - q, axis=1)
        order = np.lexsort((idx, dist))[:k]
        return idx[order].astype(np.int64), dist[order]

    def knn_batch(self, queries, k: int):
        qs = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out = [self.knn(q, k) for q in qs]
        return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])

    def nearest(self, queries):
        """Nearest point index per query (ties to the lower index)."""
        qs = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        return np.array([self.knn(q, 1)[0][0] for q in qs], dtype=np.int64)

    def radius(self, query, r: float):
        """All points within distance ``r`` (inclusive), sorted by (distance, index)."""
        if not r > 0:
            raise GeometryError("radius must be positive")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        idx = np.asarray(self.tree.query_ball_point(q, r), dtype=np.int64)
        dist = np.linalg.norm(self.points[idx] - q, axis=1)
        keep = dist <= r
        idx, dist = idx[keep], dist[keep]
        order = np.lexsort((idx, dist))
        return idx[order], dist[order]


def _index_of(cloud):
    if isinstance(cloud, SpatialIndex):
        return cloud
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return SpatialIndex(pts)


def knn(cloud, query, k: int):
    """List of ``(index, point)`` for the ``k`` nearest points to ``query``."""
    index = _index_of(cloud)
    idx, _ = index.knn(query, k)
    return [(int(i), index.points[i]) for i in idx]


def radius_query(cloud, query, r: float):
    index = _index_of(cloud)
    idx, _ = index.radius(query, r)
    return [(int(i), index.points[i]) for i in idx]


def estimate_normals(cloud: PointCloud, k: int = 30, viewpoint=(0.0, 0.0, 1.0),
                     orient: str = "direction", index: SpatialIndex | None = None
                     ) -> PointCloud:
    """PCA normals from the ``k`` nearest neighbours.

    ``orient="direction"`` flips each normal to have a non-negative dot product with
    ``viewpoint`` taken as a direction; ``orient="outward"`` points normals away from
    the cloud centroid, which is the stable choice for shell-like face scans.
    Neighbourhoods whose covariance has rank < 2 get ``normals_valid = False``.
    """
    pts = cloud.points
    n = len(pts)
    if k < 3 or k > n:
        raise GeometryError(f"normal neighbourhood k={k} must be in [3, {n}]")
    index = index or SpatialIndex(pts)
    _, nbr = index.tree.query(pts, k=k)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    valid = evals[:, 1] > 1e-10 * scale + 1e-18
    if orient == "direction":
        ref = np.broadcast_to(np.asarray(viewpoint, dtype=np.float64), pts.shape)
    elif orient == "outward":
        ref = pts - pts.mean(axis=0)
    elif orient == "location":
        ref = np.asarray(viewpoint, dtype=np.float64) - pts
    else:
        raise GeometryError(f"unknown normal orientation mode {orient!r}")
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~valid] = 0.0
    return PointCloud(pts, normals, valid)


def mean_spacing(points, index: SpatialIndex | None = None) -> float:
    """Mean nearest-neighbour distance."""
    index = index or SpatialIndex(points)
    d, _ = index.tree.query(np.asarray(points), k=2)
    return float(d[:, 1].mean())


def voxel_downsample(points, voxel: float):
    """Centroid of occupied voxels, returned in voxel-key order (deterministic)."""
    pts = np.asarray(points, dtype=np.float64)
    keys = np.floor(pts / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=len(uniq))
    return sums / counts[:, None]
