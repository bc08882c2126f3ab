import numpy as np
import pytest

from snscore.model import LongDataset, read_long_csv
from snscore.simulate import SimCondition, default_truth, generate_dataset, sleepstudy_path


def random_dataset(seed=0, sizes=(4, 4, 5, 3, 6, 4), slope=True, aux=None):
    """Small unbalanced two-level dataset with a random intercept (and slope)."""
    rng = np.random.default_rng(seed)
    cluster = np.repeat(np.arange(len(sizes)), sizes)
    n = cluster.size
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    Z = X.copy() if slope else X[:, :1].copy()
    b = rng.normal(size=(len(sizes), Z.shape[1])) * [1.5, 0.7][: Z.shape[1]]
    y = X @ [1.0, -0.5] + np.einsum("ij,ij->i", Z, b[cluster]) + rng.normal(size=n)
    aux = rng.normal(size=n) if aux is None else aux
    rnames = ("(Intercept)", "x") if slope else ("(Intercept)",)
    return LongDataset(cluster, y, X, Z, aux, ("(Intercept)", "x"), rnames)


@pytest.fixture(scope="session")
def sleepstudy():
    return read_long_csv(sleepstudy_path(), "Subject", "Reaction", ["Days"], ["Days"], aux="Days")


@pytest.fixture(scope="session")
def truth():
    return default_truth()


@pytest.fixture(scope="session")
def sim_data(truth):
    cond = SimCondition(24, 0.0, replications=1)
    return generate_dataset(cond, truth, cond.stream(0))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
