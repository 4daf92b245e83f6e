import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from servesim.presets import PRESET_NAMES, load_preset

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def presets():
    return {name: load_preset(name) for name in PRESET_NAMES}


@pytest.fixture(scope="session")
def yi(presets):
    return presets["yi34b"]


@pytest.fixture(scope="session")
def falcon(presets):
    return presets["falcon180b"]


# Acceptance criteria record one verdict each; printed after the run.
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
