"""Rigid registration: FPFH descriptors, RANSAC coarse alignment, ICP refinement."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (BoundingBox, EmptyROIError, GeometryError, Mesh, PointCloud,
                       RigidTransform, SpatialIndex, apply_transform, compose, crop_roi,
                       estimate_normals, mean_spacing, sample_surface, voxel_downsample)

log = logging.getLogger(__name__)

FPFH_BINS = 11


class RegistrationError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RegistrationConfig:
    n_samples: int = 10000
    # voxel size for the FPFH/RANSAC cloud; None keeps every sampled point
    voxel_size: float | None = 3.0
    normal_k: int = 30
    # None -> fpfh_radius_factor x the mean nearest-neighbour spacing of the feature cloud
    fpfh_radius: float | None = None
    fpfh_radius_factor: float = 8.0
    fpfh_max_nn: int = 100
    ransac_max_iter: int = 100000
    ransac_confidence: float = 0.999
    inlier_threshold: float = 5.0
    min_inlier_fraction: float = 0.03
    min_inliers: int = 10
    edge_similarity: float = 0.9
    icp_max_iter: int = 50
    icp_tolerance: float = 1e-4
    icp_max_corr: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("inlier_threshold", "icp_tolerance", "icp_max_corr", "fpfh_radius_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"registration.{name} must be > 0")
        for name in ("fpfh_radius", "voxel_size"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"registration.{name} must be > 0")
        for name in ("n_samples", "ransac_max_iter", "icp_max_iter", "fpfh_max_nn"):
            if getattr(self, name) < 1:
                raise ValueError(f"registration.{name} must be >= 1")
        if self.normal_k < 3:
            raise ValueError("registration.normal_k must be >= 3")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown registration field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FpfhFeatures:
    histograms: np.ndarray  # (n, 33)
    valid: np.ndarray  # False where the point had no usable neighbour

    def __len__(self):
        return len(self.histograms)


def _pair_features(p1, n1, p2, n2):
    """Darboux-frame angle triplet per point pair (vectorised)."""
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=1)
    ok = dist > 0
    dist = np.where(ok, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / dist
    a2 = np.einsum("ij,ij->i", n2, dp) / dist
    # source is the point whose normal makes the smaller angle with the line;
    # near-ties (e.g. shared normals) keep f3 >= 0 so rounding cannot flip it
    gap = np.abs(a2) - np.abs(a1)
    tie = np.abs(gap) <= 1e-10
    swap = np.where(tie, -a2 > a1, gap > 0)
    s_n = np.where(swap[:, None], n2, n1)
    t_n = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    f3 = np.where(swap, -a2, a1)
    v = np.cross(dp, s_n)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(s_n, v)
    f2 = np.einsum("ij,ij->i", v, t_n)
    f1 = np.arctan2(np.einsum("ij,ij->i", w, t_n), np.einsum("ij,ij->i", s_n, t_n))
    return f1, f2, f3, ok


def _bin(values, lo, hi):
    idx = np.floor(FPFH_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


def compute_fpfh(cloud: PointCloud, radius: float, max_nn: int | None = None,
                 index: SpatialIndex | None = None) -> FpfhFeatures:
    """33-bin FPFH per point (3 angular features x 11 bins).

    SPFH histograms are built from each point's radius neighbourhood, then every
    point adds the 1/distance-weighted SPFH of its neighbours, renormalised per
    11-bin block to a mass of 100.
    """
    if not cloud.has_normals:
        raise GeometryError("FPFH needs a cloud with normals")
    if not radius > 0:
        raise GeometryError("FPFH radius must be positive")
    pts, nrm, nvalid = cloud.points, cloud.normals, cloud.normals_valid
    n = len(pts)
    index = index or SpatialIndex(pts)
    nbrs = index.tree.query_ball_point(pts, radius)
    rows, cols = [], []
    for i, nb in enumerate(nbrs):
        nb = np.asarray(nb, dtype=np.int64)
        nb = nb[(nb != i) & nvalid[nb]] if nvalid[i] else nb[:0]
        if max_nn is not None and len(nb) > max_nn:
            d = np.linalg.norm(pts[nb] - pts[i], axis=1)
            nb = nb[np.lexsort((nb, d))[:max_nn]]
        rows.append(np.full(len(nb), i, dtype=np.int64))
        cols.append(nb)
    ii = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    jj = np.concatenate(cols) if cols else np.zeros(0, np.int64)

    f1, f2, f3, ok = _pair_features(pts[ii], nrm[ii], pts[jj], nrm[jj])
    counts = np.bincount(ii, minlength=n).astype(np.float64)
    inc = np.where(ok, 100.0 / np.maximum(counts[ii], 1.0), 0.0)
    spfh = np.zeros((n, 3 * FPFH_BINS))
    np.add.at(spfh, (ii, _bin(f1, -np.pi, np.pi)), inc)
    np.add.at(spfh, (ii, FPFH_BINS + _bin(f2, -1.0, 1.0)), inc)
    np.add.at(spfh, (ii, 2 * FPFH_BINS + _bin(f3, -1.0, 1.0)), inc)

    dist = np.linalg.norm(pts[jj] - pts[ii], axis=1)
    weighted = np.zeros((n, 3 * FPFH_BINS))
    np.add.at(weighted, ii, spfh[jj] / dist[:, None])
    blocks = weighted.reshape(n, 3, FPFH_BINS)
    mass = blocks.sum(axis=2, keepdims=True)
    blocks = np.where(mass > 0, blocks * (100.0 / np.where(mass > 0, mass, 1.0)), 0.0)
    hist = spfh + blocks.reshape(n, -1)
    valid = counts > 0
    hist[~valid] = 0.0
    return FpfhFeatures(hist, valid)


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` rows onto ``dst`` rows (SVD)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform.from_rt(r, cd - r @ cs)


def _kabsch_batch(src, dst):
    """Batched Kabsch for (B, k, 3) arrays; returns (B, 3, 3) rotations and (B, 3) translations."""
    cs, cd = src.mean(axis=1), dst.mean(axis=1)
    h = np.einsum("bki,bkj->bij", src - cs[:, None], dst - cd[:, None])
    u, _, vt = np.linalg.svd(h)
    v = np.transpose(vt, (0, 2, 1))
    d = np.sign(np.linalg.det(v @ np.transpose(u, (0, 2, 1))))
    d[d == 0] = 1.0
    v[:, :, 2] *= d[:, None]
    r = v @ np.transpose(u, (0, 2, 1))
    t = cd - np.einsum("bij,bj->bi", r, cs)
    return r, t


def match_features(src_feats: FpfhFeatures, dst_feats: FpfhFeatures, mutual: bool = True):
    """Nearest-neighbour matches in feature space; returns (src_idx, dst_idx)."""
    s_idx = np.flatnonzero(src_feats.valid)
    d_idx = np.flatnonzero(dst_feats.valid)
    if len(s_idx) == 0 or len(d_idx) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    fs = src_feats.histograms[s_idx]
    fd = dst_feats.histograms[d_idx]
    _, fwd = cKDTree(fd).query(fs, k=1)
    if not mutual:
        return s_idx, d_idx[fwd]
    _, back = cKDTree(fs).query(fd, k=1)
    keep = back[fwd] == np.arange(len(s_idx))
    return s_idx[keep], d_idx[fwd[keep]]


def ransac_global(src: PointCloud, dst: PointCloud, src_feats: FpfhFeatures,
                  dst_feats: FpfhFeatures, cfg: RegistrationConfig,
                  return_info: bool = False):
    """Feature-matched 3-point RANSAC; score = inlier correspondences at threshold."""
    if len(src) < 3 or len(dst) < 3:
        raise RegistrationError("ransac", "both clouds need at least 3 points")
    si, di = match_features(src_feats, dst_feats, mutual=True)
    if len(si) < 3:
        si, di = match_features(src_feats, dst_feats, mutual=False)
    m = len(si)
    if m < 3:
        raise RegistrationError("ransac", "fewer than 3 feature correspondences")
    ps, pd = src.points[si], dst.points[di]
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.inlier_threshold ** 2
    sim = cfg.edge_similarity
    batch = int(max(64, min(4096, 2_000_000 // m)))
    best = (-1, None, None)  # inliers, R, t
    done = 0
    needed = cfg.ransac_max_iter
    while done < min(needed, cfg.ransac_max_iter):
        b = min(batch, cfg.ransac_max_iter - done)
        samp = rng.integers(0, m, size=(b, 3))
        done += b
        ok = (samp[:, 0] != samp[:, 1]) & (samp[:, 0] != samp[:, 2]) & (samp[:, 1] != samp[:, 2])
        s3, d3 = ps[samp], pd[samp]
        for a, c in ((0, 1), (0, 2), (1, 2)):
            ls = np.linalg.norm(s3[:, a] - s3[:, c], axis=1)
            ld = np.linalg.norm(d3[:, a] - d3[:, c], axis=1)
            ok &= (ls > sim * ld) & (ld > sim * ls)
        if not ok.any():
            continue
        r, t = _kabsch_batch(s3[ok], d3[ok])
        moved = np.einsum("bij,mj->bmi", r, ps) + t[:, None, :]
        counts = (np.sum((moved - pd) ** 2, axis=2) < thr2).sum(axis=1)
        k = int(np.argmax(counts))  # first maximum: lowest hypothesis index wins ties
        if counts[k] > best[0]:
            best = (int(counts[k]), r[k], t[k])
        w = best[0] / m
        if w >= 1.0:
            needed = done
        elif w > 0:
            needed = int(math.ceil(math.log(1 - cfg.ransac_confidence) / math.log(1 - w ** 3)))
    n_in, r, t = best
    if r is None or n_in / m < cfg.min_inlier_fraction or n_in < cfg.min_inliers:
        raise RegistrationError(
            "ransac", f"coarse registration failed: best hypothesis has {max(n_in, 0)} of {m} "
                      f"correspondences as inliers (need fraction >= {cfg.min_inlier_fraction} "
                      f"and count >= {cfg.min_inliers})")
    # refit on the consensus set until it stops growing
    for _ in range(10):
        inl = np.sum((ps @ r.T + t - pd) ** 2, axis=1) < thr2
        tr = kabsch(ps[inl], pd[inl])
        new_inl = np.sum((tr.apply(ps) - pd) ** 2, axis=1) < thr2
        if new_inl.sum() < inl.sum():
            break
        r, t = tr.rotation, tr.translation
        if new_inl.sum() == inl.sum():
            break
    transform = RigidTransform.from_rt(orthonormal(r), t)
    frac = float(np.mean(np.sum((transform.apply(ps) - pd) ** 2, axis=1) < thr2))
    if return_info:
        return transform, {"inlier_fraction": frac, "correspondences": m, "iterations": done}
    return transform


def orthonormal(r):
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def icp(src: PointCloud, dst: PointCloud, init: RigidTransform | None = None,
        cfg: RegistrationConfig | None = None, dst_index: SpatialIndex | None = None,
        return_history: bool = False):
    """Point-to-point ICP with Kabsch updates.

    Returns the residual transform ``T_icp`` such that ``T_icp @ init`` aligns
    ``src`` to ``dst``. The tracked error is the truncated RMS
    ``sqrt(mean(min(d^2, max_corr^2)))`` over all source points, which cannot
    increase from one iteration to the next.
    """
    cfg = cfg or RegistrationConfig()
    init = init or RigidTransform.identity()
    src_pts = init.apply(src.points if isinstance(src, PointCloud) else src)
    dst_pts = dst.points if isinstance(dst, PointCloud) else np.asarray(dst)
    tree = dst_index.tree if dst_index is not None else cKDTree(dst_pts)
    cap2 = cfg.icp_max_corr ** 2

    def correspond(pts):
        d, j = tree.query(pts, k=1)
        return d, j

    total = RigidTransform.identity()
    cur = src_pts
    d, j = correspond(cur)
    rms = math.sqrt(np.mean(np.minimum(d ** 2, cap2)))
    history = [rms]
    for _ in range(cfg.icp_max_iter):
        inl = d <= cfg.icp_max_corr
        if not inl.any():
            raise RegistrationError("icp", "no correspondences within max correspondence distance")
        if inl.sum() < 3:
            break
        step = kabsch(cur[inl], dst_pts[j[inl]])
        cand = step.apply(cur)
        d_new, j_new = correspond(cand)
        rms_new = math.sqrt(np.mean(np.minimum(d_new ** 2, cap2)))
        if rms_new > rms:
            break  # guard against rounding on converged input
        total = compose(step, total)
        cur, d, j = cand, d_new, j_new
        history.append(rms_new)
        if rms - rms_new < cfg.icp_tolerance:
            rms = rms_new
            break
        rms = rms_new
    if not (d <= cfg.icp_max_corr).any():
        raise RegistrationError("icp", "no correspondences within max correspondence distance")
    if return_history:
        return total, history
    return total


class PreparedCloud:
    """A feature cloud with its spatial index, normals and FPFH descriptors."""

    def __init__(self, points, cfg: RegistrationConfig, radius: float | None = None):
        pts = np.asarray(points, dtype=np.float64)
        if cfg.voxel_size:
            pts = voxel_downsample(pts, cfg.voxel_size)
        self.index = SpatialIndex(pts)
        k = min(cfg.normal_k, len(pts))
        self.cloud = estimate_normals(PointCloud(pts), k=k, orient="outward", index=self.index)
        self.radius = radius or cfg.fpfh_radius_factor * mean_spacing(pts, self.index)
        self.features = compute_fpfh(self.cloud, self.radius, cfg.fpfh_max_nn, self.index)


class Reference:
    """Reference cloud prepared once: features for RANSAC, ROI crop for ICP."""

    def __init__(self, cloud: PointCloud, roi: BoundingBox, cfg: RegistrationConfig):
        self.cloud = cloud
        self.roi = roi
        self.cfg = cfg
        self.prepared = PreparedCloud(cloud.points, cfg, cfg.fpfh_radius)
        try:
            self.cropped = crop_roi(cloud, roi)
        except EmptyROIError as exc:
            raise RegistrationError("crop", f"reference: {exc}") from exc
        self.cropped_index = SpatialIndex(self.cropped.points)


def align_subject(subject: Mesh, reference, roi: BoundingBox | None = None,
                  cfg: RegistrationConfig | None = None, return_info: bool = False):
    """Full rigid alignment chain; returns (aligned full-resolution mesh, T_final)."""
    if not isinstance(reference, Reference):
        cfg = cfg or RegistrationConfig()
        reference = Reference(reference, roi, cfg)
    cfg = reference.cfg if cfg is None else cfg
    try:
        low = sample_surface(subject, cfg.n_samples, cfg.seed)
    except GeometryError as exc:
        raise RegistrationError("sample", str(exc)) from exc
    src = PreparedCloud(low.points, cfg, reference.prepared.radius)
    t_coarse, rinfo = ransac_global(src.cloud, reference.prepared.cloud, src.features,
                                    reference.prepared.features, cfg, return_info=True)
    coarse_vertices = t_coarse.apply(subject.vertices)
    try:
        roi_cloud = crop_roi(PointCloud(coarse_vertices), reference.roi)
    except EmptyROIError as exc:
        raise RegistrationError("crop", str(exc)) from exc
    t_icp, hist = icp(roi_cloud, reference.cropped, RigidTransform.identity(), cfg,
                      dst_index=reference.cropped_index, return_history=True)
    t_final = compose(t_icp, t_coarse)
    aligned = apply_transform(subject, t_final)
    if return_info:
        return aligned, t_final, {"ransac": rinfo, "icp_rms": hist,
                                  "t_coarse": t_coarse.tolist(), "t_icp": t_icp.tolist()}
    return aligned, t_final
