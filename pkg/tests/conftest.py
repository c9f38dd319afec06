import pytest
from hypothesis import HealthCheck, settings

from c1hier.c1basis import C1Space
from c1hier.cli_io import BUILTINS, builtin_geometry
from c1hier.hierarchy import LevelStack

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def geometries():
    return {name: builtin_geometry(name) for name in BUILTINS}


@pytest.fixture(scope="session")
def threepatch(geometries):
    return geometries["threepatch-ev3"]


@pytest.fixture(scope="session")
def square2(geometries):
    return geometries["square-2p"]


@pytest.fixture(scope="session")
def lshape(geometries):
    return geometries["lshape-8p"]


@pytest.fixture(scope="session")
def space_k5(threepatch):
    return C1Space(threepatch, 3, 1, 5)


@pytest.fixture(scope="session")
def stacks(geometries):
    return {name: LevelStack(g, 3, 1, 3) for name, g in geometries.items()}


_ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def acceptance():
    """Collects one result line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
