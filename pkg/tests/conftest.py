import numpy as np
import pytest

from commdecode.env import GridConfig
from commdecode.planner import distill_policy, value_iteration
from commdecode.transition import generate_transitions, train_transition


@pytest.fixture(scope="session")
def grid():
    return GridConfig()


@pytest.fixture(scope="session")
def q5(grid):
    return value_iteration(grid)


@pytest.fixture(scope="session")
def policy5(q5):
    return distill_policy(q5, rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def transition_data(policy5, grid):
    return generate_transitions(policy5, grid, 50000, np.random.default_rng(1))


@pytest.fixture(scope="session")
def transition_run(transition_data, grid):
    return train_transition(transition_data, grid, np.random.default_rng(2), lr=1e-3, steps=1000)


@pytest.fixture(scope="session")
def tmodel5(transition_run):
    return transition_run.model


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
