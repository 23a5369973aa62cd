import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from palnet.atlas import (
    LandmarkSchemaError, LandmarkSet, mean_template, project_to_surface, read_landmarks, write_landmarks,
)
from palnet.geometry import PointCloud, RigidTransform, sample_surface
from palnet.patching import (
    EmptyPatchError, PatchTensor, build_patch_tensor, extract_knn_patch, extract_radius_patch, order_patch,
)


def _rows_in(rows, cloud_pts):
    s = {tuple(r) for r in np.asarray(cloud_pts, dtype=np.float64)}
    return all(tuple(r) in s for r in np.asarray(rows, dtype=np.float64))


# -- landmark sets -----------------------------------------------------------

def test_landmark_set_validation():
    with pytest.raises(LandmarkSchemaError):
        LandmarkSet(["a", "a"], np.zeros((2, 3)))
    with pytest.raises(LandmarkSchemaError):
        LandmarkSet(["a"], np.zeros((2, 3)))
    with pytest.raises(LandmarkSchemaError):
        LandmarkSet(["a"], [[np.nan, 0, 0]])
    s = LandmarkSet(["a", "b"], [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(s["b"], [4, 5, 6])
    assert s.subset(["b"]).names == ("b",)


@pytest.mark.parametrize("ext", ["csv", "json"])
def test_landmark_io_roundtrip(tmp_path, ext):
    rng = np.random.default_rng(0)
    s = LandmarkSet(["N", "Prn", "Sn"], rng.normal(scale=50, size=(3, 3)))
    write_landmarks(tmp_path / f"l.{ext}", s)
    r = read_landmarks(tmp_path / f"l.{ext}")
    assert r.names == s.names
    np.testing.assert_array_equal(r.coords, s.coords)
    if ext == "csv":
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "name,x,y,z"


def test_landmark_csv_bad_header(tmp_path):
    (tmp_path / "b.csv").write_text("id,x,y,z\nN,0,0,0\n")
    with pytest.raises(LandmarkSchemaError):
        read_landmarks(tmp_path / "b.csv")


# -- template ----------------------------------------------------------------

def test_mean_template_examples():
    a = LandmarkSet(["k"], [[0, 0, 0]])
    b = LandmarkSet(["k"], [[2, 2, 2]])
    np.testing.assert_array_equal(mean_template([a]).coords, a.coords)
    np.testing.assert_array_equal(mean_template([a, b]).coords, [[1, 1, 1]])
    rng = np.random.default_rng(1)
    c = LandmarkSet(["x", "y"], rng.normal(size=(2, 3)))
    assert np.array_equal(mean_template([c] * 4).coords, c.coords)
    with pytest.raises(LandmarkSchemaError):
        mean_template([a, LandmarkSet(["j"], [[0, 0, 0]])])
    with pytest.raises(LandmarkSchemaError):
        mean_template([])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mean_template_commutes_with_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    names = [f"L{i}" for i in range(5)]
    sets = [LandmarkSet(names, rng.normal(scale=40, size=(5, 3))) for _ in range(6)]
    t = RigidTransform.from_axis_angle(rng.normal(size=3), rng.uniform(0, 3), rng.normal(scale=20, size=3))
    lhs = mean_template([s.with_coords(t.apply(s.coords)) for s in sets]).coords
    rhs = t.apply(mean_template(sets).coords)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_project_to_surface_examples(canonical):
    cloud = PointCloud(np.array([[0, 0, 9.5], [0, 0, 0], [5, 5, 5]]))
    t = LandmarkSet(["a", "b"], [[0, 0, 10], [5, 5, 5]])
    np.testing.assert_array_equal(project_to_surface(t, cloud).coords, [[0, 0, 9.5], [5, 5, 5]])
    mesh, lms = canonical
    surf = sample_surface(mesh, 5000, seed=2)
    fit = project_to_surface(lms, surf)
    assert len(fit) == 50 and _rows_in(fit.coords, surf.points)
    again = project_to_surface(fit, surf)
    np.testing.assert_array_equal(again.coords, fit.coords)


# -- patches -----------------------------------------------------------------

def test_knn_patch_examples():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(np.sort(extract_knn_patch(PointCloud(pts), pts[0], 50), axis=0), np.sort(pts, axis=0))
    np.testing.assert_array_equal(extract_knn_patch(PointCloud(pts), pts[7], 1), pts[7:8])
    with pytest.raises(Exception):
        extract_knn_patch(PointCloud(pts), pts[0], 51)


def test_knn_patch_matches_scan_on_face(canonical):
    cloud = sample_surface(canonical[0], 10_000, seed=0)
    c = canonical[1]["Prn"]
    got = extract_knn_patch(cloud, c, 1000)
    d = np.linalg.norm(cloud.points - c, axis=1)
    want = cloud.points[np.lexsort((np.arange(len(d)), d))[:1000]]
    np.testing.assert_array_equal(got, want)


def test_knn_patch_radius_monotone(canonical):
    cloud = sample_surface(canonical[0], 3000, seed=0)
    c = canonical[1]["N"]
    r = [np.linalg.norm(extract_knn_patch(cloud, c, k) - c, axis=1).max() for k in range(20, 60)]
    assert all(b >= a for a, b in zip(r, r[1:]))


def test_radius_patch_contracts():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-10, 10, size=(2000, 3))
    cloud = PointCloud(pts)
    d = np.linalg.norm(pts, axis=1)
    # exactly K hits: returned as is (sorted by distance then index)
    r = np.sort(d)[49] + 1e-9
    exact = extract_radius_patch(cloud, (0, 0, 0), r, 50, seed=1)
    np.testing.assert_array_equal(exact, pts[np.argsort(d, kind="stable")[:50]])
    # more hits: distinct subset
    many = extract_radius_patch(cloud, (0, 0, 0), np.sort(d)[99] + 1e-9, 50, seed=1)
    assert len({tuple(p) for p in many}) == 50 and np.all(np.linalg.norm(many, axis=1) <= np.sort(d)[99] + 1e-9)
    # fewer hits: exactly K rows drawn from the hits
    few = extract_radius_patch(cloud, (0, 0, 0), np.sort(d)[9] + 1e-9, 50, seed=1)
    assert few.shape == (50, 3) and _rows_in(few, pts[np.argsort(d)[:10]])
    np.testing.assert_array_equal(few, extract_radius_patch(cloud, (0, 0, 0), np.sort(d)[9] + 1e-9, 50, seed=1))
    with pytest.raises(EmptyPatchError, match="Prn"):
        extract_radius_patch(cloud, (100, 100, 100), 1.0, 50, name="Prn")


def test_order_patch_examples():
    p = np.array([[3.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    np.testing.assert_array_equal(order_patch(p), [[1, 0, 0], [2, 0, 0], [3, 0, 0]])
    s = order_patch(p)
    np.testing.assert_array_equal(order_patch(s), s)
    ties = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    np.testing.assert_array_equal(order_patch(ties), ties)  # stable


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_order_patch_is_permutation(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(40, 3))
    o = order_patch(p, (0.1, 0.2, 0.3))
    np.testing.assert_array_equal(np.sort(o, axis=0), np.sort(p, axis=0))
    d = np.linalg.norm(o - (0.1, 0.2, 0.3), axis=1)
    assert np.all(np.diff(d) >= 0)


def test_build_patch_tensor(canonical):
    cloud = sample_surface(canonical[0], 3000, seed=0)
    lms = canonical[1].subset(["N", "Prn"])
    pt = build_patch_tensor([(cloud, lms)], k=100, names=lms.names)
    assert pt.shape == (1, 2, 100, 3) and pt.data.dtype == np.float32
    cast = cloud.points.astype(np.float32)
    assert _rows_in(pt.data[0, 0], cast) and _rows_in(pt.data[0, 1], cast)
    d = np.linalg.norm(pt.data.astype(np.float64), axis=3)
    assert np.all(np.diff(d, axis=2) >= 0)
    un = build_patch_tensor([(cloud, lms)], k=100, ordered=False)
    for j in range(2):
        np.testing.assert_array_equal(np.sort(un.data[0, j], axis=0), np.sort(pt.data[0, j], axis=0))
    again = build_patch_tensor([(cloud, lms)], k=100, names=lms.names)
    assert again.data.tobytes() == pt.data.tobytes()


def test_build_patch_tensor_errors(canonical):
    cloud = sample_surface(canonical[0], 500, seed=0)
    with pytest.raises(ValueError):
        build_patch_tensor([(cloud, np.zeros((2, 3))), (cloud, np.zeros((3, 3)))], k=10)
    with pytest.raises(EmptyPatchError, match="subject 0, landmark Go_R"):
        build_patch_tensor([(cloud, np.full((1, 3), 1e4))], strategy="radius", radius=1.0, k=10, names=["Go_R"])


def test_patch_tensor_save_load(tmp_path, canonical):
    cloud = sample_surface(canonical[0], 1000, seed=0)
    pt = build_patch_tensor([(cloud, canonical[1].coords[:3])] * 2, strategy="radius", radius=15.0, k=20, seed=4)
    pt.save(tmp_path / "p.bin")
    back = PatchTensor.load(tmp_path / "p.bin")
    assert back.data.tobytes() == pt.data.tobytes()
    assert back.meta() == pt.meta()
