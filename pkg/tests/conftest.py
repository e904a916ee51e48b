"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

import pytest

CRITERIA = {
    1: "parameter calibration",
    2: "MAC calibration",
    3: "gradient suite",
    4: "oracle equivalence",
    5: "structural invariants",
    6: "desk-scale end-to-end",
    7: "loss-variant wiring",
    8: "determinism",
}

_outcomes: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Tests append human-readable measurements here; they appear on the criterion line."""
    notes: list[str] = []
    request.node.user_properties.append(("detail", notes))
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    notes = next((v for k, v in item.user_properties if k == "detail"), [])
    _outcomes.setdefault(mark.args[0], []).append((item.name, rep.passed, list(notes)))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        ok = all(passed for _, passed, _ in runs)
        notes = "; ".join(note for _, _, ns in runs for note in ns)
        tr.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}" + (f" | {notes}" if notes else ""))
