import numpy as np
import pytest

from collective_ac.domains import GridParams, make_grid_domain
from collective_ac.model import ObservationModel
from collective_ac.validation import random_critic, random_policy, tiny_model


@pytest.fixture
def tiny():
    m = tiny_model(population=3, horizon=2, flip=0.3, b0=(0.6, 0.4))
    obs = ObservationModel.for_model(m, "o1")
    return m, obs, random_policy(m, obs, 0, scale=1.0), random_critic(m, obs, 1)


@pytest.fixture
def small_grid():
    return make_grid_domain(GridParams(width=3, height=3, initial_states=(0, 1), goal_state=8,
                                       horizon=8, population=6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
