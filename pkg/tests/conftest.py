import numpy as np
import pytest

from mvflow import constant, mean_field_ou


def normal_cloud(rng, M):
    return rng.standard_normal((M, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def bm():
    return constant(0.0, 1.0)


@pytest.fixture
def ou():
    return mean_field_ou(1.0, 0.5)


@pytest.fixture
def cloud():
    return normal_cloud


_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Print and collect one PASS/FAIL line, then return the flag for asserting."""

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
