import numpy as np
import pytest

from vortex_ldp.torus import TorusGrid


@pytest.fixture
def grid16():
    return TorusGrid(16)


@pytest.fixture
def grid64():
    return TorusGrid(64)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
