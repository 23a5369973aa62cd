import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import rotation_error_deg
from palnet.atlas import LandmarkSet
from palnet.estimators import LandmarkAtlas, PALNetRegressor, PatchExtractor, RigidAligner
from palnet.geometry import RigidTransform, sample_surface
from palnet.synthetic import FaceGenParams, generate_subject, reference_roi

TINY = dict(filters=(4, 8, 8), pool_factors=(2, 2, 5), mlp_widths=(16, 16, 3), dropout=0.0,
            max_epochs=6, batch_size=2)


def _toy(m=6, n=3, k=20, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, n, k, 3)).astype(np.float32)
    y = x.mean(axis=2) + rng.normal(scale=0.1, size=(m, n, 3))
    return x, y


def test_get_params_and_clone():
    est = PALNetRegressor(**TINY, random_state=3)
    params = est.get_params()
    assert params["filters"] == (4, 8, 8) and params["random_state"] == 3
    twin = clone(est)
    assert twin is not est and twin.get_params() == params
    est.set_params(alpha=0.5, beta=0.5)
    assert est.alpha == 0.5 and twin.alpha == 0.6


def test_unfitted_estimators_raise():
    x, _ = _toy()
    with pytest.raises(NotFittedError):
        PALNetRegressor().predict(x)
    with pytest.raises(NotFittedError):
        LandmarkAtlas().transform([np.zeros((4, 3))])
    with pytest.raises(NotFittedError):
        RigidAligner().transform([])


def test_regressor_fit_predict_save_load(tmp_path):
    x, y = _toy()
    est = PALNetRegressor(**TINY).fit(x, y)
    assert est.history_.epochs and 1 <= est.best_epoch_ <= 6
    pred = est.predict(x)
    assert pred.shape == y.shape and pred.dtype == np.float64
    assert np.isfinite(est.score(x, y)) and est.score(x, y) <= 0
    path = tmp_path / "model.ckpt"
    est.save(path)
    back = PALNetRegressor.load(path)
    np.testing.assert_array_equal(back.predict(x), pred)
    assert back.get_params() == est.get_params()


def test_regressor_is_deterministic():
    x, y = _toy()
    a = PALNetRegressor(**TINY, random_state=1).fit(x, y).predict(x)
    b = PALNetRegressor(**TINY, random_state=1).fit(x, y).predict(x)
    np.testing.assert_array_equal(a, b)


def test_regressor_eval_set_and_landmark_sets():
    x, y = _toy(m=8)
    names = ("a", "b", "c")
    sets = [LandmarkSet(names, c) for c in y]
    est = PALNetRegressor(**TINY).fit(x[:6], sets[:6], eval_set=(x[6:], sets[6:]))
    out = est.predict_landmarks(x[6:])
    assert [o.names for o in out] == [names, names]
    surfaces = [p.reshape(-1, 3) for p in x[6:]]
    snapped = est.predict_landmarks(x[6:], surfaces=surfaces)
    for s, surf in zip(snapped, surfaces):
        assert all(any(np.array_equal(c, v) for v in surf) for c in s.coords)
    assert est.validation_loss(x[6:], y[6:]) >= 0


def test_regressor_input_validation():
    x, y = _toy()
    est = PALNetRegressor(**TINY)
    with pytest.raises(ValueError):
        est.fit(x, y[:4])
    with pytest.raises(ValueError):
        est.fit(x[:, :, :15], y)  # 15 is not divisible by the pooling chain
    bad = x.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, y)
    est.fit(x, y)
    with pytest.raises(ValueError):
        est.predict(x[:, :2])
    with pytest.raises(ValueError):
        est.predict(x[:, :, :10])


def test_atlas_and_patch_extractor():
    rng = np.random.default_rng(4)
    cloud = rng.normal(size=(400, 3)) * 10
    names = ("p", "q")
    sets = [LandmarkSet(names, cloud[[1, 2]] + rng.normal(size=(2, 3))) for _ in range(4)]
    atlas = LandmarkAtlas().fit(sets)
    np.testing.assert_allclose(atlas.template_.coords, np.mean([s.coords for s in sets], axis=0))
    (proj,) = atlas.transform([cloud])
    assert all(any(np.array_equal(c, v) for v in cloud) for c in proj.coords)

    pt = PatchExtractor(k=20).transform([(cloud, proj), (cloud, proj)])
    assert pt.shape == (2, 2, 20, 3)
    d = np.linalg.norm(pt.data[0, 0].astype(np.float64), axis=1)
    assert np.all(np.diff(d) >= 0)
    with pytest.raises(ValueError):
        PatchExtractor(strategy="radius").fit()
    with pytest.raises(ValueError):
        PatchExtractor(strategy="ball").fit()


def test_rigid_aligner_recovers_pose(reference, canonical, face_params):
    mesh, _ = canonical
    pose = RigidTransform.from_axis_angle([0.2, 1.0, -0.3], np.radians(12), (8.0, -5.0, 10.0))
    moved, _, _ = generate_subject(face_params, 0, coefficients=np.zeros(8), pose=pose)
    aligner = RigidAligner(roi=reference_roi(face_params)).fit(sample_surface(mesh, 10_000, seed=0))
    (aligned,) = aligner.transform([moved])
    assert aligned.faces.shape == moved.faces.shape
    (t,) = aligner.transforms_
    assert rotation_error_deg(t.rotation @ pose.rotation) < 1.0
    assert np.linalg.norm(t.apply(pose.translation)) < 1.0  # t . pose ~ identity
    with pytest.raises(TypeError):
        aligner.transform([np.zeros((3, 3))])
