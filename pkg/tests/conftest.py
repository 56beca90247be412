import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from acmobility.fem import FESpace
from acmobility.mesh import Mesh, build_structured_mesh

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def square8():
    return FESpace(build_structured_mesh((-2, 2, -2, 2), 8))


@pytest.fixture(scope="session")
def unit4():
    return FESpace(build_structured_mesh((0, 1, 0, 1), 4))


@pytest.fixture(scope="session")
def two_triangles():
    return FESpace(Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
