import numpy as np
import pytest

from congested_ot.grid import Grid, SourceMeasure


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def line3():
    """The 1-D three-node fixture: t = (-1, 0, 1), h = 1."""
    g = Grid((3,), 1.0)
    return g, SourceMeasure(g, [-1.0, 0.0, 1.0])


@pytest.fixture
def square2():
    """2x2 grid with a unit dipole between opposite corners."""
    g = Grid((2, 2), 1.0)
    return g, SourceMeasure(g, [-1.0, 0.0, 0.0, 1.0])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}")
