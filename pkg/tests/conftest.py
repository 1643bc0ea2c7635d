import numpy as np
import pytest
import torch

from priqa.featuremetrics import ToyFeatureProvider
from priqa.scenekit import generate_planar_scene, generate_two_plane_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def planar2():
    return generate_planar_scene(0, 2, resolution=(64, 64))


@pytest.fixture(scope="session")
def planar8():
    return generate_planar_scene(0, 8, resolution=(64, 64))


@pytest.fixture(scope="session")
def twoplane():
    return generate_two_plane_scene(0, 3, resolution=(64, 64), arc_degrees=40.0)


@pytest.fixture(scope="session")
def provider():
    return ToyFeatureProvider(dim=16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
