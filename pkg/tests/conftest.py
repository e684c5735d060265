import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ltpic.core import CODATA, Grid, ParticleStore

settings.register_profile("ltpic", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ltpic")


def maxwellian_store(n, T, L=1.0, seed=0, capacity=None, weight=1.0):
    g = np.random.default_rng(seed)
    pos = np.zeros((n, 3))
    pos[:, 0] = g.uniform(0, L, n)
    vel = g.normal(scale=np.sqrt(CODATA.e * T / CODATA.m_e), size=(n, 3))
    return ParticleStore.from_arrays(pos, vel, np.full(n, weight), capacity=capacity or 3 * n)


@pytest.fixture
def make_store():
    return maxwellian_store


@pytest.fixture
def argon_grid():
    g = Grid(M=10, L=0.01)
    g.n_n[:] = 3.22e22
    return g


def bundled_config(name="default.ini", **changes):
    from importlib import resources

    from ltpic.config import parse_config

    cfg = parse_config(resources.files("ltpic.data").joinpath(name).read_text())
    return cfg.replace(**changes) if changes else cfg


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
