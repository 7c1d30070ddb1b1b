import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            crit = getattr(rep, "criterion", None)
            if crit is None or (outcome == "passed" and rep.when != "call"):
                continue
            num, title = crit
            status = "PASS" if outcome == "passed" else "FAIL"
            detail = dict(rep.user_properties).get("detail", "")
            lines[num] = f"criterion {num:2d} {status}  {title}" + (f"  [{detail}]" if detail else "")
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
