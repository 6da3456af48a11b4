import numpy as np
import pytest

from artery_surrogate.geometry import sample_geometry

ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {name}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def record_note(number, text):
    """Informative line attached to a criterion; never pass/fail."""
    line = f"CRITERION {number:>2} NOTE  {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_spec():
    return sample_geometry(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
