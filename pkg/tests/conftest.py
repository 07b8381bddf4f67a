import numpy as np
import pytest

from smallmass.models import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scalar_sin():
    return build_model("scalar-sin")


def random_stable(rng, n, margin=0.2):
    """Random matrix whose symmetric part is positive definite."""
    A = rng.normal(size=(n, n))
    sym = A @ A.T / n + margin * np.eye(n)
    skew = rng.normal(size=(n, n))
    return sym + 0.5 * (skew - skew.T)


def random_spd(rng, n):
    B = rng.normal(size=(n, n))
    return B @ B.T + 0.1 * np.eye(n)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append((number, line))
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
