import numpy as np
import pytest

from refprior.autograd import default_dtype
from refprior.synthesis import DegradationSchedule, build_dataset, generate_sources


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(root, count, seed, size=56, grids=(1, 7, 14, 28)):
    """Procedural T/R sources plus a built dataset under ``root``; returns the dataset dir."""
    generate_sources(root / "T", count, size, seed, "T")
    generate_sources(root / "R", count, size, seed + 1000, "R")
    build_dataset(root / "T", root / "R", DegradationSchedule(), root / "ds", grids, size, seed)
    return root / "ds"


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("small"), 6, seed=5)


ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one ``PASS``/``FAIL`` line for the acceptance summary and return the verdict."""

    def record(number, passed, detail):
        ACCEPTANCE_LINES.append((number, f"C{number} {'PASS' if passed else 'FAIL'}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
