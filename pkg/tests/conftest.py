import numpy as np
import pytest

from splatnewton.synth import make_cameras, random_scene


def relerr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene():
    return random_scene(np.random.default_rng(7), 12)


@pytest.fixture
def cameras48():
    return make_cameras(4, 48)
