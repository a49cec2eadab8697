from pathlib import Path

import numpy as np
import pytest

from pdpmarket.types import Database, Owner

DATA = Path(__file__).parent / "data"

_acceptance_lines = []


def make_db(caps, locations=None, rates=None, cells=None):
    caps = list(caps)
    n = len(caps)
    locations = [0] * n if locations is None else list(locations)
    rates = [1.0] * n if rates is None else list(rates)
    cells = (max(locations) + 1) if cells is None else cells
    owners = [Owner(f"u{i}", int(locations[i]), float(caps[i]), float(rates[i]))
              for i in range(n)]
    return Database(tuple(owners), cells)


@pytest.fixture
def two_purchase_db():
    """Fifty unit-rate owners; caps chosen so the fixed pattern is [0.5 x 49, 1]."""
    return make_db([4.0] * 49 + [8.0], locations=[i % 4 for i in range(50)], cells=4)


@pytest.fixture
def two_purchase_rho():
    return np.array([0.5] * 49 + [1.0])


@pytest.fixture
def acceptance_report():
    def record(criterion, ok, detail):
        _acceptance_lines.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
