import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from iqn_rnn.data import Dataset, TimeSeries  # noqa: E402


def make_dataset(values, freq="hourly", domain="real", prediction_length=4, start="2021-03-01 00:00"):
    return Dataset(
        [TimeSeries(str(i), start, freq, v, domain) for i, v in enumerate(values)],
        prediction_length,
        "toy",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of every run
ACCEPTANCE: list[str] = []


def record(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
