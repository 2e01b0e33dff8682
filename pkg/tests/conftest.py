import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("TPAM_MNIST_DIR", ROOT / "data" / "mnist"))

# criterion number -> (status, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[str, str]] = {}
CRITERIA_TOTAL = 10


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        CRITERIA[number] = ("PASS" if passed else "FAIL", detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA_TOTAL + 1):
        status, detail = CRITERIA.get(n, ("NOT RUN", "skipped or deselected"))
        terminalreporter.write_line(f"criterion {n:>2}: {status:<7} {detail}")
