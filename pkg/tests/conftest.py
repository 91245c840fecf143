import numpy as np
import pytest

from stihc.mesh import SpotGrid, build_delaunay


def regular_grid(m, size=1.0):
    """m x m lattice on [0, size]^2, row-major."""
    t = np.linspace(0.0, size, m)
    x, y = np.meshgrid(t, t)
    coords = np.column_stack([x.ravel(), y.ravel()])
    return SpotGrid(tuple(f"s{i}" for i in range(m * m)), coords)


def random_grid(n, seed):
    rng = np.random.default_rng(seed)
    return SpotGrid(tuple(f"s{i}" for i in range(n)), rng.uniform(size=(n, 2)))


@pytest.fixture(scope="session")
def grid10():
    return regular_grid(10)


@pytest.fixture(scope="session")
def mesh10(grid10):
    return build_delaunay(grid10)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
