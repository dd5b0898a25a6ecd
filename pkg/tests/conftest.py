"""Per-criterion summary for the acceptance suite."""

import re
from collections import OrderedDict

import pytest

_CRITERIA: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, title = m.args
            _CRITERIA.setdefault(n, {"title": title, "outcomes": [], "notes": []})


def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("criterion")
    if m is None or call.when == "teardown":
        return
    entry = _CRITERIA[m.args[0]]
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    if call.when == "setup" and not failed:
        return
    entry["outcomes"].append("fail" if failed else "pass")
    if failed:
        msg = str(call.excinfo.value).strip().splitlines()
        entry["notes"].append(f"{item.name}: {msg[0] if msg else call.excinfo.typename}")
    for key, value in item.user_properties:
        if key == "detail":
            entry["notes"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    ran = {n: e for n, e in _CRITERIA.items() if e["outcomes"]}
    if not ran:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ran):
        e = ran[n]
        status = "PASS" if all(o == "pass" for o in e["outcomes"]) else "FAIL"
        tr.write_line(f"criterion {n:2d} {status}  {e['title']}")
        for note in e["notes"]:
            tr.write_line("      " + re.sub(r"\s+", " ", note))
