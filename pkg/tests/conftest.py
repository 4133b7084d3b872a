import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Record PASS/FAIL for the calling acceptance test under ``label``."""
    holder = {}

    def name(label):
        holder["label"] = label

    yield name
    label = holder.get("label", request.node.name)
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    line = f"[{'PASS' if ok else 'FAIL'}] {label}"
    ACCEPTANCE.append(line)
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
