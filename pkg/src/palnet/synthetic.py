"""Parametric face-like surfaces with exactly known landmarks.

A face is the front of an ellipsoid (centre behind the nose, so the coordinate
origin sits in the nasal region) displaced radially by Gaussian feature bumps in
(azimuth, elevation) space. Landmarks are fixed surface parameters tied to those
features, so shape coefficients move both the geometry and the landmarks.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .atlas import LandmarkSet, write_landmarks
from .geometry import BoundingBox, Mesh, RigidTransform, axis_angle_matrix, sample_surface
from .meshio import save_ply
from .schema import EAR_LANDMARKS, LANDMARK_NAMES

N_SHAPE = 8

# (azimuth, elevation) in radians; right side is negative azimuth (-x).
# "nose"/"eye"/"mouth" entries are offsets relative to the moving feature.
_MIDLINE_PARAMS = {
    "Tr": (0.0, 0.95, None), "G": (0.0, 0.40, None), "N": (0.0, 0.24, None),
    "Prn": (0.0, 0.0, "nose"), "C": (0.0, -0.07, "nose"), "Sn": (0.0, -0.13, "nose"),
    "Ls": (0.0, 0.04, "mouth"), "Sto": (0.0, 0.0, "mouth"), "Li": (0.0, -0.05, "mouth"),
    "Sl": (0.0, -0.19, "mouth"), "Pg": (0.0, -0.74, None), "Gn": (0.0, -0.88, None),
}
_PAIRED_PARAMS = {
    "T": (1.50, 0.00, None), "Pra": (1.44, 0.06, None), "Sa": (1.55, 0.22, None),
    "Pa": (1.66, 0.05, None), "Sba": (1.55, -0.13, None), "Ft": (0.55, 0.55, None),
    "Zy": (1.10, 0.05, None), "Go": (1.20, -0.62, None),
    "Os": (0.0, 0.17, "eye"), "Ex": (0.16, 0.0, "eye"), "Or": (0.0, -0.13, "eye"),
    "En": (-0.18, 0.0, "eye"),
    "Chk": (0.62, -0.20, None), "Ac": (0.13, -0.08, "nose"), "Al": (0.11, -0.04, "nose"),
    "Itn": (0.07, -0.12, "nose"), "Stn": (0.05, -0.05, "nose"), "Cph": (0.05, 0.08, "mouth"),
    "Ch": (0.28, 0.0, "mouth"),
}


@dataclass
class FaceGenParams:
    radii: tuple = (75.0, 100.0, 90.0)
    nose_amplitude: float = 22.0
    brow_amplitude: float = 6.0
    chin_amplitude: float = 8.0
    cheek_amplitude: float = 6.0
    # standard deviations of the 8 shape coefficients' effects
    radius_scale_sd: float = 0.04
    nose_amplitude_sd: float = 3.0
    nose_shift_sd: float = 0.04
    eye_shift_sd: float = 0.04
    mouth_shift_sd: float = 0.04
    chin_amplitude_sd: float = 2.5
    shape_scale: float = 1.0
    # height (mm) and width (mm) of the local relief centred on every landmark;
    # it makes each landmark a locally identifiable apex, as anatomical
    # definitions ("most anterior point", "deepest point") assume
    landmark_relief: float = 0.0
    relief_sigma: float = 4.0
    # per-subject tangential displacement (mm, sd) of every landmark, carried by its relief bump
    landmark_jitter: float = 0.0
    max_rotation_deg: float = 20.0
    max_translation: float = 30.0
    noise_sigma: float = 0.0
    resolution: tuple = (140, 120)  # grid points in azimuth, elevation
    azimuth_range: tuple = (-1.8, 1.8)
    elevation_range: tuple = (-1.05, 1.15)
    corrupt_ears: bool = False
    ear_corruption_radius: float = 14.0
    seed: int = 0

    def __post_init__(self):
        if min(self.radii) <= 0:
            raise ValueError("ellipsoid radii must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.relief_sigma <= 0:
            raise ValueError("relief_sigma must be > 0")
        if self.landmark_jitter < 0:
            raise ValueError("landmark_jitter must be >= 0")
        if min(self.resolution) < 3:
            raise ValueError("mesh resolution must be at least 3x3")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synthetic field(s): {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class FaceShape:
    radii: np.ndarray
    nose_amp: float
    nose_elev: float
    eye_azim: float
    eye_elev: float
    mouth_elev: float
    mouth_half_width: float
    chin_amp: float
    brow_amp: float
    cheek_amp: float
    relief: float = 0.0
    relief_sigma: float = 4.0
    # (n_landmarks, 2) offsets in mm along (azimuth, elevation)
    offsets: np.ndarray | None = None


def shape_from_coefficients(params: FaceGenParams, coeffs, offsets=None) -> FaceShape:
    c = np.asarray(coeffs, dtype=np.float64) * params.shape_scale
    radii = np.asarray(params.radii, dtype=np.float64) * (1.0 + params.radius_scale_sd * c[0:3])
    return FaceShape(
        radii=radii,
        nose_amp=params.nose_amplitude + params.nose_amplitude_sd * c[3],
        nose_elev=-0.12 + params.nose_shift_sd * c[4],
        eye_azim=0.33 + params.eye_shift_sd * c[5],
        eye_elev=0.12,
        mouth_elev=-0.45 + params.mouth_shift_sd * c[6],
        mouth_half_width=0.28,
        chin_amp=params.chin_amplitude + params.chin_amplitude_sd * c[7],
        brow_amp=params.brow_amplitude,
        cheek_amp=params.cheek_amplitude,
        relief=params.landmark_relief,
        relief_sigma=params.relief_sigma,
        offsets=None if offsets is None else np.asarray(offsets, dtype=np.float64),
    )


def _gauss(az, el, a0, e0, sa, se):
    return np.exp(-0.5 * (((az - a0) / sa) ** 2 + ((el - e0) / se) ** 2))


def bump_height(shape: FaceShape, az, el):
    """Radial displacement in mm at surface parameters (az, el)."""
    az = np.asarray(az, dtype=np.float64)
    el = np.asarray(el, dtype=np.float64)
    h = shape.nose_amp * _gauss(az, el, 0.0, shape.nose_elev + 0.06, 0.085, 0.16)
    h = h + 0.35 * shape.nose_amp * _gauss(az, el, 0.0, shape.nose_elev, 0.06, 0.06)
    h = h + shape.brow_amp * _gauss(az, el, 0.0, 0.38, 0.45, 0.07)
    h = h + shape.chin_amp * _gauss(az, el, 0.0, -0.76, 0.22, 0.12)
    h = h + 4.0 * _gauss(az, el, 0.0, shape.mouth_elev, 0.22, 0.06)
    for side in (-1.0, 1.0):
        h = h - 7.0 * _gauss(az, el, side * shape.eye_azim, shape.eye_elev, 0.13, 0.09)
        h = h + shape.cheek_amp * _gauss(az, el, side * 0.62, -0.2, 0.18, 0.16)
        h = h + 10.0 * _gauss(az, el, side * 1.52, 0.05, 0.08, 0.14)  # ears
        h = h + 3.0 * _gauss(az, el, side * 1.2, -0.62, 0.12, 0.1)  # jaw angle
    if shape.relief:
        # angular widths from the mean horizontal / vertical radii
        sa = shape.relief_sigma / np.mean(shape.radii[[0, 2]])
        se = shape.relief_sigma / shape.radii[1]
        for a0, e0 in landmark_parameters(shape):
            h = h + shape.relief * _gauss(az, el, a0, e0, sa / max(np.cos(e0), 0.2), se)
    return h


def surface_points(shape: FaceShape, az, el):
    """Points on the deformed ellipsoid; the centre sits at (0, 0, -radius_z)."""
    az = np.asarray(az, dtype=np.float64)
    el = np.asarray(el, dtype=np.float64)
    ax, ay, azr = shape.radii
    e = np.stack([ax * np.cos(el) * np.sin(az), ay * np.sin(el), azr * np.cos(el) * np.cos(az)], axis=-1)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    p = e * (1.0 + bump_height(shape, az, el)[..., None] / norm)
    p[..., 2] -= azr
    return p


def landmark_parameters(shape: FaceShape):
    """(azimuth, elevation) for every schema landmark, in LANDMARK_NAMES order."""
    anchors = {
        None: (0.0, 0.0), "nose": (0.0, shape.nose_elev),
        "mouth": (0.0, shape.mouth_elev),
    }
    out = {}
    for name, (a, e, anchor) in _MIDLINE_PARAMS.items():
        a0, e0 = anchors[anchor]
        out[name] = (a0 + a, e0 + e)
    for base, (a, e, anchor) in _PAIRED_PARAMS.items():
        for suffix, side in (("R", -1.0), ("L", 1.0)):
            if anchor == "eye":
                a0, e0 = shape.eye_azim, shape.eye_elev
            elif anchor == "mouth" and base == "Ch":
                a0, e0 = shape.mouth_half_width - a, shape.mouth_elev
            else:
                a0, e0 = anchors[anchor]
            out[f"{base}_{suffix}"] = (side * (a0 + a), e0 + e)
    ae = np.array([out[n] for n in LANDMARK_NAMES])
    if shape.offsets is not None:
        ae[:, 0] += shape.offsets[:, 0] / (np.mean(shape.radii[[0, 2]]) * np.maximum(np.cos(ae[:, 1]), 0.2))
        ae[:, 1] += shape.offsets[:, 1] / shape.radii[1]
    return ae


def _grid_mesh(params: FaceGenParams, shape: FaceShape):
    na, ne = params.resolution
    az = np.linspace(*params.azimuth_range, na)
    el = np.linspace(*params.elevation_range, ne)
    aa, ee = np.meshgrid(az, el, indexing="ij")
    verts = surface_points(shape, aa, ee).reshape(-1, 3)
    idx = np.arange(na * ne).reshape(na, ne)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return verts, faces


def _vertex_normals(verts, faces):
    fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    vn = np.zeros_like(verts)
    for i in range(3):
        np.add.at(vn, faces[:, i], fn)
    return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-12)


def _drop_vertices(verts, faces, drop):
    keep = ~drop
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    fkeep = keep[faces].all(axis=1)
    return verts[keep], remap[faces[fkeep]]


def random_pose(rng, max_rotation_deg, max_translation) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.0, max_rotation_deg))
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform.from_rt(axis_angle_matrix(axis, angle), t)


def canonical_face(params: FaceGenParams):
    """Zero-coefficient face: (Mesh, LandmarkSet) with identity pose and no noise."""
    shape = shape_from_coefficients(params, np.zeros(N_SHAPE))
    verts, faces = _grid_mesh(params, shape)
    lm_param = landmark_parameters(shape)
    lms = surface_points(shape, lm_param[:, 0], lm_param[:, 1])
    return Mesh(verts, faces), LandmarkSet(LANDMARK_NAMES, lms)


def generate_subject(params: FaceGenParams, subject_seed: int, coefficients=None,
                     pose: RigidTransform | None = None):
    """One synthetic subject: (posed Mesh, posed ground-truth LandmarkSet, applied pose)."""
    rng = np.random.default_rng([params.seed, subject_seed])
    coeffs = rng.normal(size=N_SHAPE) if coefficients is None else np.asarray(coefficients, float)
    sampled_pose = random_pose(rng, params.max_rotation_deg, params.max_translation)
    pose = sampled_pose if pose is None else pose
    offsets = None
    if params.landmark_jitter > 0:
        offsets = rng.normal(scale=params.landmark_jitter, size=(len(LANDMARK_NAMES), 2))
    shape = shape_from_coefficients(params, coeffs, offsets)
    if min(shape.radii) <= 0:
        raise ValueError("degenerate face: non-positive radius")
    verts, faces = _grid_mesh(params, shape)
    lm_param = landmark_parameters(shape)
    lms = surface_points(shape, lm_param[:, 0], lm_param[:, 1])
    if params.noise_sigma > 0:
        verts = verts + rng.normal(scale=params.noise_sigma, size=(len(verts), 1)) * _vertex_normals(verts, faces)
    if params.corrupt_ears:
        ear_idx = [LANDMARK_NAMES.index(n) for n in EAR_LANDMARKS]
        d = np.linalg.norm(verts[:, None, :] - lms[None, ear_idx, :], axis=2)
        verts, faces = _drop_vertices(verts, faces, (d < params.ear_corruption_radius).any(axis=1))
    mesh = Mesh(pose.apply(verts), faces)
    return mesh, LandmarkSet(LANDMARK_NAMES, pose.apply(lms)), pose


def reference_roi(params: FaceGenParams) -> BoundingBox:
    """Facial-core box in the canonical frame: excludes the ears and the sides of the head."""
    ax, ay, azr = params.radii
    return BoundingBox((-0.85 * ax, -0.95 * ay, -0.6 * azr), (0.85 * ax, 0.95 * ay, 0.6 * azr))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(params: FaceGenParams, n_subjects: int, out_dir, seed: int | None = None,
                     reference_points: int = 10000):
    """Write meshes, landmark CSVs, the reference cloud and ROI box plus a manifest."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if seed is not None:
        params = FaceGenParams.from_dict({**params.to_dict(), "seed": seed})
    os.makedirs(os.path.join(out_dir, "meshes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "landmarks"), exist_ok=True)
    subjects = []
    for i in range(n_subjects):
        sid = f"subject_{i:04d}"
        mesh, lms, pose = generate_subject(params, i)
        mpath = os.path.join("meshes", f"{sid}.ply")
        lpath = os.path.join("landmarks", f"{sid}.csv")
        save_ply(os.path.join(out_dir, mpath), mesh)
        write_landmarks(os.path.join(out_dir, lpath), lms)
        subjects.append({"id": sid, "mesh": mpath, "landmarks": lpath, "pose": pose.tolist()})
    canon, canon_lms = canonical_face(FaceGenParams.from_dict({**params.to_dict(), "corrupt_ears": False}))
    ref = sample_surface(canon, reference_points, seed=params.seed)
    save_ply(os.path.join(out_dir, "reference.ply"), ref)
    write_landmarks(os.path.join(out_dir, "reference_landmarks.csv"), canon_lms)
    with open(os.path.join(out_dir, "roi.json"), "w", encoding="utf-8") as fh:
        json.dump(reference_roi(params).to_dict(), fh, indent=1)
    files = [s["mesh"] for s in subjects] + [s["landmarks"] for s in subjects]
    files += ["reference.ply", "reference_landmarks.csv", "roi.json"]
    manifest = {
        "params": params.to_dict(),
        "n_subjects": n_subjects,
        "subjects": subjects,
        "reference": "reference.ply",
        "roi": "roi.json",
        "checksums": {f: _sha256(os.path.join(out_dir, f)) for f in files},
    }
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest
