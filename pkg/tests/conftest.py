import numpy as np
import pytest

from subopt.core import Dataset, LossModel


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_dataset(rng, N, d, kind="linear", intercept=True):
    X = rng.standard_normal((N, d))
    if intercept:
        X[:, 0] = 1.0
    theta = rng.standard_normal(d)
    if kind == "linear":
        y = X @ theta + rng.standard_normal(N)
    else:
        p = 1.0 / (1.0 + np.exp(-X @ theta))
        y = (rng.random(N) < p).astype(float)
    return Dataset(X, y), LossModel.from_name(kind, d)


@pytest.fixture
def small_linear(rng):
    return random_dataset(rng, 200, 4, "linear")


@pytest.fixture
def small_logistic(rng):
    return random_dataset(rng, 400, 4, "logistic")


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
