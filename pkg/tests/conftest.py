import numpy as np
import pytest

from dpcvqa.datastore import SyntheticConfig, generate_synthetic

_ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion (printed in the summary)."""

    def record(number, passed, detail):
        line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


@pytest.fixture(scope="session")
def small_container():
    return generate_synthetic(SyntheticConfig(record_count=60, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
