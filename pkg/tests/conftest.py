import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wtstream import ann, synthetic  # noqa: E402

T0 = datetime(2024, 7, 1, tzinfo=timezone.utc)
STUBS = Path(__file__).parent / "stubs"


@pytest.fixture
def t0():
    return T0


@pytest.fixture(scope="session")
def wt_split():
    columns, wt = synthetic.wt_dataset(seed=0)
    inputs = np.column_stack([columns["TM"], columns["RF"], columns["TM_lag"]])
    return ann.split_rows(inputs, wt)


@pytest.fixture(scope="session")
def trained_model(wt_split):
    train_set, _ = wt_split
    return ann.train(ann.AnnConfig(seed=0), train_set)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
