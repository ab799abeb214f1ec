import numpy as np
import pytest

from hiercloth.assets import TriMesh
from hiercloth.scenes import grid_mesh


@pytest.fixture
def grid4():
    return grid_mesh(4, 4, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def single_triangle(p0=(0, 0, 0), p1=(1, 0, 0), p2=(0, 1, 0)):
    return TriMesh(np.array([p0, p1, p2], dtype=float), [[0, 1, 2]])


def write_text(path, text):
    path.write_text(text)
    return path


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
