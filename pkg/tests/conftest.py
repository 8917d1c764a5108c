import numpy as np
import pytest

from dtnlab.geometry import build_grid_partition
from dtnlab.mesh import make_mesh


@pytest.fixture(scope="session")
def square2():
    return build_grid_partition(2, "unit_square")


@pytest.fixture(scope="session")
def square2_omega_mesh(square2):
    return make_mesh(square2, 0.1, extension=False)


@pytest.fixture(scope="session")
def disk2():
    return build_grid_partition(2, "disk")


@pytest.fixture(scope="session")
def disk2_mesh(disk2):
    return make_mesh(disk2, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
