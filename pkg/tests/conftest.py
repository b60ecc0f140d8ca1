import numpy as np
import pytest

from witnessreg.geom import Alignment, random_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_alignment(d, rng, tscale=0.5):
    return Alignment(random_rotation(d, rng), rng.uniform(-tscale, tscale, d))


def angle_rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])
