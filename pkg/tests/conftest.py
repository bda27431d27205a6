import numpy as np
import pytest

from enki.problems import gaussian_bumps_problem, linear_problem

ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bumps():
    return gaussian_bumps_problem()


@pytest.fixture(scope="session")
def scalar_linear():
    return linear_problem()


@pytest.fixture(scope="session")
def report():
    return report_criterion
