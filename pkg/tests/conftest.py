"""Acceptance bookkeeping: one PASS/FAIL line per criterion at the end of the run."""
from collections import defaultdict

import pytest

_outcomes = defaultdict(list)  # n -> [(nodeid, passed, gate)]
_notes = defaultdict(list)


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion of the running test."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        _notes[marker.args[0]].append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, gate = marker.args[0], marker.kwargs.get("gate", True)
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes[n].append((item.nodeid, rep.passed, gate))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        gated = [ok for _, ok, gate in _outcomes[n] if gate]
        verdict = "PASS" if gated and all(gated) else "FAIL"
        detail = "; ".join(_notes.get(n, []))
        tr.write_line(f"criterion {n:2d}: {verdict}" + (f"  ({detail})" if detail else ""))
