"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_outcomes: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        ok = call.excinfo is None
        _outcomes.setdefault(marker.args[0], []).append("PASS" if ok else f"FAIL ({item.name})")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_outcomes):
        fails = [r for r in _outcomes[name] if r != "PASS"]
        terminalreporter.write_line(f"{name}: {'PASS' if not fails else ' '.join(fails)}")
