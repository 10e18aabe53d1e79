import numpy as np
import pytest

from iqcdiss.analysis import robust_ellipsoid_analysis
from iqcdiss.statespace import EXAMPLE_INTERVAL, Realization, example_plant


@pytest.fixture(scope="session")
def plant():
    return example_plant()


@pytest.fixture(scope="session")
def interval():
    return EXAMPLE_INTERVAL


@pytest.fixture(scope="session")
def solved(plant, interval):
    """``nu -> (bundle, report)`` for the example, solved once per session."""
    return {nu: robust_ellipsoid_analysis(plant, interval, nu) for nu in range(4)}


def random_stable(rng, n, m, p, shift=0.5):
    a = rng.standard_normal((n, n))
    if n:
        a -= (np.max(np.linalg.eigvals(a).real) + shift) * np.eye(n)
    return Realization(a, rng.standard_normal((n, m)), rng.standard_normal((p, n)), rng.standard_normal((p, m)))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
