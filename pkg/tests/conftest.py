"""Acceptance bookkeeping: tests marked ``criterion(n, title)`` are grouped and
reported as one PASS/FAIL line per criterion at the end of the run."""
from collections import OrderedDict

_TITLES = {}
_NODES = {}
_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _TITLES[n] = title
            _NODES[item.nodeid] = n


def pytest_runtest_logreport(report):
    n = _NODES.get(report.nodeid)
    if n is None:
        return
    ok = _OUTCOMES.setdefault(n, OrderedDict())
    if report.failed:
        ok[report.nodeid] = False
    elif report.when == "call":
        ok.setdefault(report.nodeid, report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_TITLES):
        res = _OUTCOMES.get(n)
        expected = sum(1 for v in _NODES.values() if v == n)
        if not res or len(res) < expected:
            status = "NOT RUN" if not res else "INCOMPLETE"
        else:
            status = "PASS" if all(res.values()) else "FAIL"
        tr.write_line(f"criterion {n:2d}: {status:10s} {_TITLES[n]}")
