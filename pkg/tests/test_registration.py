import numpy as np
import pytest

from conftest import rotation_error_deg
from palnet.geometry import BoundingBox, GeometryError, Mesh, PointCloud, RigidTransform, estimate_normals, sample_surface
from palnet.registration import (
    RegistrationConfig, RegistrationError, compute_fpfh, icp, kabsch, ransac_global,
    align_subject, PreparedCloud,
)
from palnet.synthetic import generate_subject


def _face_cloud(canonical, n=3000, seed=0):
    return sample_surface(canonical[0], n, seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(inlier_threshold=0)
    with pytest.raises(ValueError):
        RegistrationConfig(icp_max_iter=0)
    with pytest.raises(ValueError):
        RegistrationConfig.from_dict({"bogus": 1})
    cfg = RegistrationConfig(seed=4)
    assert RegistrationConfig.from_dict(cfg.to_dict()) == cfg


def test_kabsch_recovers_transform():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(50, 3))
    t = RigidTransform.from_axis_angle(rng.normal(size=3), 1.1, (3, -2, 7))
    got = kabsch(src, t.apply(src))
    np.testing.assert_allclose(got.matrix, t.matrix, atol=1e-10)


def test_fpfh_shape_and_rigid_invariance(canonical):
    cloud = _face_cloud(canonical, 1500)
    c1 = estimate_normals(cloud, k=20, orient="outward")
    f1 = compute_fpfh(c1, 12.0)
    assert f1.histograms.shape == (1500, 33) and np.all(f1.histograms >= 0)
    t = RigidTransform.from_axis_angle((1, 2, 0.5), np.radians(30), (10, 0, -4))
    moved = PointCloud(t.apply(c1.points), c1.normals @ t.rotation.T, c1.normals_valid)
    f2 = compute_fpfh(moved, 12.0)
    np.testing.assert_allclose(f2.histograms, f1.histograms, atol=1e-6)


def test_fpfh_plane_histograms_agree():
    g = np.arange(0, 40.0, 1.0)
    xx, yy = np.meshgrid(g, g)
    pts = np.c_[xx.ravel(), yy.ravel(), np.zeros(xx.size)]
    c = estimate_normals(PointCloud(pts), k=10)
    f = compute_fpfh(c, 3.0)
    interior = np.all((pts[:, :2] > 8) & (pts[:, :2] < 31), axis=1)
    h = f.histograms[interior]
    mass = h[0].sum()
    l1 = np.abs(h[:, None, :] - h[None, :, :]).sum(axis=2)
    assert l1.max() < 0.05 * mass


def test_fpfh_isolated_point_flagged():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0, 0.1, 0], [0.1, 0.1, 0], [100.0, 100, 0]])
    c = PointCloud(pts, np.tile([0, 0, 1.0], (5, 1)), np.ones(5, bool))
    f = compute_fpfh(c, 1.0)
    assert not f.valid[4] and np.all(f.histograms[4] == 0)
    assert f.valid[:4].all()


def test_fpfh_needs_normals():
    with pytest.raises(GeometryError):
        compute_fpfh(PointCloud(np.zeros((3, 3)) + np.arange(3)[:, None]), 1.0)


def test_ransac_self_alignment(canonical):
    cfg = RegistrationConfig()
    dst = PreparedCloud(_face_cloud(canonical, 10_000, 1).points, cfg)
    t = RigidTransform.from_axis_angle((0.3, 1, 0.2), np.radians(15), (12, -8, 5))
    src = PreparedCloud(t.inverse().apply(dst.cloud.points), RegistrationConfig(voxel_size=None), dst.radius)
    got, info = ransac_global(src.cloud, dst.cloud, src.features, dst.features, cfg, return_info=True)
    assert rotation_error_deg(got.rotation @ t.rotation.T) < 1.0
    assert np.linalg.norm(got.translation - t.translation) < 1.0
    assert info["inlier_fraction"] > 0.9


def test_ransac_unrelated_cloud_fails(canonical):
    cfg = RegistrationConfig()
    dst = PreparedCloud(_face_cloud(canonical, 4000).points, cfg)
    rng = np.random.default_rng(0)
    junk = PreparedCloud(rng.uniform(-300, 300, size=(4000, 3)), cfg, dst.radius)
    with pytest.raises(RegistrationError) as err:
        ransac_global(junk.cloud, dst.cloud, junk.features, dst.features, cfg)
    assert err.value.stage == "ransac"


def test_ransac_deterministic(canonical):
    cfg = RegistrationConfig(ransac_max_iter=2000)
    dst = PreparedCloud(_face_cloud(canonical, 5000).points, cfg)
    t = RigidTransform.from_axis_angle((0, 1, 0), 0.2, (5, 0, 0))
    src = PreparedCloud(t.apply(_face_cloud(canonical, 5000, 9).points), cfg, dst.radius)
    a = ransac_global(src.cloud, dst.cloud, src.features, dst.features, cfg)
    b = ransac_global(src.cloud, dst.cloud, src.features, dst.features, cfg)
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_icp_small_perturbation(canonical):
    dst = _face_cloud(canonical, 2000)
    t = RigidTransform.from_axis_angle((0.2, 1, 0.1), np.radians(2), (3, 0, 0))
    src = PointCloud(t.apply(dst.points))
    got, hist = icp(src, dst, None, RegistrationConfig(icp_max_iter=200, icp_tolerance=1e-9), return_history=True)
    moved = got.apply(src.points)
    assert np.sqrt(np.mean(np.sum((moved - dst.points) ** 2, axis=1))) < 0.1
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_icp_fixed_point(canonical):
    dst = _face_cloud(canonical, 1000)
    got = icp(dst, dst)
    np.testing.assert_allclose(got.matrix, np.eye(4), atol=1e-9)


def test_icp_no_correspondences(canonical):
    dst = _face_cloud(canonical, 500)
    far = PointCloud(dst.points + 1000.0)
    with pytest.raises(RegistrationError) as err:
        icp(far, dst)
    assert err.value.stage == "icp"


def test_align_subject_round_trip(face_params, canonical, reference):
    mesh, lms = canonical
    t = RigidTransform.from_axis_angle((1, -0.5, 0.3), np.radians(18), (20, -15, 10))
    posed = Mesh(t.apply(mesh.vertices), mesh.faces)
    aligned, t_final, info = align_subject(posed, reference, return_info=True)
    err = t_final @ t
    assert rotation_error_deg(err.rotation) < 1.0 and np.linalg.norm(err.translation) < 1.0
    transfer = np.linalg.norm(t_final.apply(t.apply(lms.coords)) - lms.coords, axis=1)
    assert transfer.max() < 0.5
    assert aligned.n_vertices == posed.n_vertices
    np.testing.assert_array_equal(aligned.faces, posed.faces)
    assert set(info) >= {"ransac", "icp_rms", "t_coarse", "t_icp"}


def test_align_already_aligned(canonical, reference):
    _, t_final = align_subject(canonical[0], reference)
    assert rotation_error_deg(t_final.rotation) < 0.5 and np.linalg.norm(t_final.translation) < 0.5


def test_align_is_deterministic(face_params, reference):
    mesh, _, _ = generate_subject(face_params, 3)
    _, a = align_subject(mesh, reference)
    _, b = align_subject(mesh, reference)
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_align_empty_roi_names_stage(canonical):
    cloud = sample_surface(canonical[0], 10_000, seed=0)
    far_box = BoundingBox((1e4, 1e4, 1e4), (1e4 + 1, 1e4 + 1, 1e4 + 1))
    with pytest.raises(RegistrationError) as err:
        align_subject(canonical[0], cloud, far_box)
    assert err.value.stage == "crop"
