from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from mhselect import market
from mhselect.config import load_dgp

FIXTURES = Path(__file__).parent / "fixtures"

# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def shipped_config(name):
    return resources.files("mhselect") / "data" / f"{name}.cfg"


@pytest.fixture
def panel12_path():
    return FIXTURES / "panel12.csv"


@pytest.fixture
def premiums12():
    """Two insurers per (canton, deductible, plan type) cell for ZH and BE."""
    rows = []
    for canton, level in (("ZH", 400.0), ("BE", 350.0)):
        for ded in market.DEDUCTIBLES:
            for plan_type in market.PLAN_TYPES:
                for k, offset in enumerate((-20.0, 20.0)):
                    rows.append((canton, "adult", ded, plan_type, f"I{k}",
                                 level - ded / 50 + offset))
    return market.PremiumTable.from_rows(rows)


@pytest.fixture(scope="session")
def recovery_config():
    return load_dgp(shipped_config("recovery"))


@pytest.fixture(scope="session")
def null_config():
    return load_dgp(shipped_config("null"))


@pytest.fixture(scope="session")
def calibrated_config():
    return load_dgp(shipped_config("calibrated"))


@pytest.fixture
def rng():
    return np.random.default_rng(20190101)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
