import numpy as np
import pytest

from tabpref.datasets import adult_like, planted_rule
from tabpref.tabular import Schema, Table, categorical, numeric


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def planted():
    return planted_rule(300, noise=0.1, seed=0)


@pytest.fixture(scope="session")
def adult():
    return adult_like(300, seed=0)


@pytest.fixture
def mixed_table():
    schema = Schema(
        (numeric("a"), numeric("n", is_integer=True), categorical("c", ["p", "q", "r"]), categorical("y", ["0", "1"])),
        target="y",
    )
    rng = np.random.default_rng(7)
    n = 120
    data = np.column_stack(
        [rng.normal(size=n), rng.integers(0, 10, n), rng.integers(0, 3, n), rng.integers(0, 2, n)]
    ).astype(float)
    return Table(schema, data)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
