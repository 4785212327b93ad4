import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lbvcnn.bank import generate_bank  # noqa: E402


@pytest.fixture(scope="session")
def bank():
    return generate_bank(64, 0.9, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        status, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status} - {detail}")
