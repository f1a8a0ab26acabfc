import numpy as np
import pytest

from lpv_mhe_mpc.lpv_plant import SchedulingBounds, discretize, msd_vertices

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def design_model():
    return discretize(msd_vertices(SchedulingBounds.msd()), 0.05)


@pytest.fixture(scope="session")
def full_state_model():
    return discretize(msd_vertices(SchedulingBounds.msd(), C=np.eye(2)), 0.05)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
