import json
import os

import numpy as np
import pytest

from conftest import rotation_error_deg
from palnet.atlas import read_landmarks
from palnet.geometry import RigidTransform, SpatialIndex
from palnet.meshio import load_mesh
from palnet.registration import align_subject
from palnet.schema import EAR_LANDMARKS, LANDMARK_NAMES
from palnet.synthetic import (N_SHAPE, FaceGenParams, canonical_face, generate_dataset,
                              generate_subject)


def test_params_validation_and_roundtrip():
    with pytest.raises(ValueError):
        FaceGenParams(radii=(75.0, 0.0, 90.0))
    with pytest.raises(ValueError):
        FaceGenParams(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        FaceGenParams.from_dict({"wings": 2})
    p = FaceGenParams(radii=(70.0, 95.0, 85.0), corrupt_ears=True)
    assert FaceGenParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_canonical_subject(face_params, canonical):
    mesh, lms = generate_subject(face_params, 0, coefficients=np.zeros(N_SHAPE),
                                 pose=RigidTransform.identity())[:2]
    cmesh, clms = canonical
    np.testing.assert_array_equal(mesh.vertices, cmesh.vertices)
    np.testing.assert_array_equal(lms.coords, clms.coords)
    assert lms.names == tuple(LANDMARK_NAMES) and len(lms) == 50
    midline = [LANDMARK_NAMES.index(n) for n in ("Tr", "N", "Prn", "Sn", "Pg")]
    assert np.all(clms.coords[midline, 0] == 0.0)
    # pronasale is the most anterior landmark
    assert np.argmax(clms.coords[:, 2]) == LANDMARK_NAMES.index("Prn")


def test_same_seed_is_bit_identical(face_params):
    a = generate_subject(face_params, 5)
    b = generate_subject(face_params, 5)
    np.testing.assert_array_equal(a[0].vertices, b[0].vertices)
    np.testing.assert_array_equal(a[1].coords, b[1].coords)
    np.testing.assert_array_equal(a[2].matrix, b[2].matrix)
    c = generate_subject(face_params, 6)
    assert not np.array_equal(a[1].coords, c[1].coords)


def test_landmarks_lie_on_the_surface(face_params):
    mesh, lms, _ = generate_subject(face_params, 3)
    edges = mesh.vertices[mesh.faces] - mesh.vertices[np.roll(mesh.faces, 1, axis=1)]
    longest = np.linalg.norm(edges, axis=2).max()
    d = np.linalg.norm(mesh.vertices[SpatialIndex(mesh.vertices).nearest(lms.coords)] - lms.coords, axis=1)
    assert d.max() < longest


def test_applied_pose_is_recovered(face_params, reference):
    for seed in (11, 12):
        mesh, lms, pose = generate_subject(face_params, seed, coefficients=np.zeros(N_SHAPE))
        _, t = align_subject(mesh, reference)
        expected = pose.inverse()
        assert rotation_error_deg(t.rotation @ expected.rotation.T) < 1.0
        assert np.linalg.norm(t.translation - expected.translation) < 1.0


def test_inter_subject_variability(face_params):
    ident = RigidTransform.identity()
    sets = np.stack([generate_subject(face_params, s, pose=ident)[1].coords for s in range(6)])
    d = [np.linalg.norm(sets[i] - sets[j], axis=1).mean() for i in range(6) for j in range(i)]
    assert np.mean(d) > 1.0


def test_landmark_relief_changes_geometry_not_landmark_parameters():
    plain = FaceGenParams()
    relief = FaceGenParams(landmark_relief=3.0)
    m0, l0 = canonical_face(plain)
    m1, l1 = canonical_face(relief)
    r0, r1 = np.linalg.norm(l0.coords - [0, 0, -plain.radii[2]], axis=1), \
        np.linalg.norm(l1.coords - [0, 0, -relief.radii[2]], axis=1)
    # every landmark sits at the apex of its own bump, raised by about the relief height
    assert np.all(r1 - r0 > 2.0)
    assert not np.array_equal(m0.vertices, m1.vertices)


def test_corrupt_ears_removes_vertices_near_ear_landmarks():
    params = FaceGenParams(corrupt_ears=True)
    mesh, lms, _ = generate_subject(params, 2)
    clean, _, _ = generate_subject(FaceGenParams(), 2)
    assert len(mesh.vertices) < len(clean.vertices)
    index = SpatialIndex(mesh.vertices)
    for name in EAR_LANDMARKS:
        d = np.linalg.norm(mesh.vertices[index.nearest(lms[name][None])[0]] - lms[name])
        assert d >= params.ear_corruption_radius - 1e-9


def test_generate_dataset_layout(tmp_path):
    params = FaceGenParams(resolution=(40, 30))
    manifest = generate_dataset(params, 3, tmp_path, seed=4)
    assert manifest["n_subjects"] == 3 and manifest["params"]["seed"] == 4
    assert len(os.listdir(tmp_path / "meshes")) == 3 and len(os.listdir(tmp_path / "landmarks")) == 3
    for name in ("reference.ply", "reference_landmarks.csv", "roi.json", "dataset.json"):
        assert (tmp_path / name).exists()
    ref = load_mesh(tmp_path / "reference.ply")
    assert len(ref.vertices) == 10_000
    s0 = manifest["subjects"][0]
    assert len(read_landmarks(tmp_path / s0["landmarks"])) == 50
    assert load_mesh(tmp_path / s0["mesh"]).faces.shape[1] == 3
    assert set(manifest["checksums"]) >= {s0["mesh"], s0["landmarks"], "reference.ply"}


def test_landmark_jitter_moves_landmarks_tangentially():
    ident = RigidTransform.identity()
    base = generate_subject(FaceGenParams(landmark_relief=3.0), 4, pose=ident)
    jit = generate_subject(FaceGenParams(landmark_relief=3.0, landmark_jitter=3.0), 4, pose=ident)
    again = generate_subject(FaceGenParams(landmark_relief=3.0, landmark_jitter=3.0), 4, pose=ident)
    np.testing.assert_array_equal(jit[1].coords, again[1].coords)
    shift = np.linalg.norm(jit[1].coords - base[1].coords, axis=1)
    # 2-d offsets with sd 3 mm: mean length about 3 * sqrt(pi / 2)
    assert 2.0 < shift.mean() < 6.0
    mesh, lms = jit[0], jit[1]
    d = np.linalg.norm(mesh.vertices[SpatialIndex(mesh.vertices).nearest(lms.coords)] - lms.coords, axis=1)
    edges = np.linalg.norm(mesh.vertices[mesh.faces] - mesh.vertices[np.roll(mesh.faces, 1, axis=1)], axis=2)
    assert d.max() < edges.max()
    with pytest.raises(ValueError):
        FaceGenParams(landmark_jitter=-1.0)
