import pytest

from memkalman.kalman import precompute_gains
from memkalman.scenarios import shift20, tracking2d

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def tracking():
    return tracking2d()


@pytest.fixture(scope="session")
def shift():
    return shift20()


@pytest.fixture(scope="session")
def tracking_schedule(tracking):
    return precompute_gains(tracking.model, tracking.P0, tracking.N)
