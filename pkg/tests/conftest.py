import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from seeupo_lab.envs import TreeBanditSpec

settings.register_profile("repo", derandomize=True, deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_tree():
    """T=2, two actions per turn, rewards (0,0)->0, (0,1)->1, (1,0)->2, (1,1)->0."""
    return TreeBanditSpec(1, 2, (2, 2), np.array([[0.0, 1.0, 2.0, 0.0]]), np.array([1.0]), 2.0)
