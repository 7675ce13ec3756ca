import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[key] = f"{'PASS' if passed else 'FAIL'} criterion {key}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
