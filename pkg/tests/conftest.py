import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spherespde.mesh import RegionMap, build_icosphere, build_mesh, tag_regions

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ico2():
    return build_icosphere(2)


@pytest.fixture(scope="session")
def world_mesh():
    """Region-tagged 500-triangle mesh with land, sea and buffer cells."""
    return tag_regions(build_mesh("geodesic:5"), RegionMap.world())


@pytest.fixture(scope="session")
def world_mesh_small():
    return tag_regions(build_mesh("geodesic:3"), RegionMap.world())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
