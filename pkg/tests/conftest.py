import numpy as np
import pytest

from fklvi.expfam import Family

ALL_FAMILIES = list(Family)


def random_eta(family, rng, n=None):
    """Random valid natural parameters away from domain boundaries."""
    shape = () if n is None else (n,)
    if family is Family.GAUSSIAN_MEAN:
        return rng.normal(0.0, 3.0, size=shape + (1,))
    if family is Family.GAUSSIAN_NATURAL:
        eta1 = rng.normal(0.0, 2.0, size=shape)
        eta2 = -rng.uniform(0.1, 3.0, size=shape)
        return np.stack([eta1, eta2], axis=-1)
    radius = rng.uniform(0.1, 30.0, size=shape)
    angle = rng.uniform(0.0, 2 * np.pi, size=shape)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
