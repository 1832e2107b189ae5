import numpy as np
import pytest

from skiplab.data import Dataset, TargetSpec, sample_sphere


def random_dataset(d, n, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    X = sample_sphere(n, d, rng)
    y = rng.uniform(-scale, scale, n)
    return Dataset(X, y, TargetSpec(), seed)


def random_params(d, m, L, seed, scale=0.3):
    from skiplab.netcore import ModelParams

    rng = np.random.default_rng(seed)
    K = L - 1
    return ModelParams(
        rng.normal(0, scale, (K, m)),
        rng.normal(0, scale, (K, m, d)),
        rng.normal(0, scale, (K, d, m)),
        rng.normal(0, scale, (K, m)),
    )


@pytest.fixture
def small_dataset():
    return random_dataset(3, 6, 11)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
