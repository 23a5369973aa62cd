import numpy as np
import pytest

from palnet.geometry import sample_surface
from palnet.registration import Reference, RegistrationConfig
from palnet.synthetic import FaceGenParams, canonical_face, reference_roi


@pytest.fixture(scope="session")
def face_params():
    return FaceGenParams()


@pytest.fixture(scope="session")
def canonical(face_params):
    return canonical_face(face_params)


@pytest.fixture(scope="session")
def reference(face_params, canonical):
    mesh, _ = canonical
    cloud = sample_surface(mesh, 10_000, seed=0)
    return Reference(cloud, reference_roi(face_params), RegistrationConfig())


def rotation_error_deg(r):
    return float(np.degrees(np.arccos(np.clip((np.trace(r) - 1) / 2, -1, 1))))


# criterion number -> "PASS/FAIL ..." line, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
