import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dropout_ope import mdp_core as mc  # noqa: E402

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mdp(rng):
    """Two agents, two substates and two actions each, joint-state rewards."""
    return mc.random_mdp(rng, (2, 2), (2, 2), gamma=0.8)


@pytest.fixture
def soft_behavior(small_mdp):
    return mc.epsilon_soft(mc.optimal_policy(small_mdp), 0.2)
