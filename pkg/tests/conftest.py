import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from thinstruct import Geometry, MeshResolution, build_multistructure

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def geom():
    return Geometry()


@pytest.fixture(scope="session")
def coarse_res():
    return MeshResolution(na=4, nza=8, nb=12, nhb=4, n_interval=16)


@pytest.fixture(scope="session")
def ms_small(geom, coarse_res):
    return build_multistructure(geom, coarse_res, r_eps=0.5)
