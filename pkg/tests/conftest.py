"""Acceptance bookkeeping: tests marked ``criterion(n, title)`` are folded into
one PASS/FAIL line per criterion in the terminal summary."""

import pytest

_outcomes: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _outcomes.setdefault(number, {"title": title, "ok": True, "notes": []})
    if report.failed:
        entry["ok"] = False
        entry["notes"].append(item.name)
    elif report.skipped:
        entry["ok"] = False
        entry["notes"].append(f"{item.name} skipped")
    for name, value in item.user_properties:
        if name == "measured":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(dict.fromkeys(entry["notes"]))
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}" + (f"  [{notes}]" if notes else ""))
