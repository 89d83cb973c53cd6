import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> {"title": str, "outcome": str, "details": [str]}
_CRITERIA: dict[int, dict] = {}


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    number, title = mark.args
    return _CRITERIA.setdefault(number, {"title": title, "outcome": None, "details": []})


@pytest.fixture
def detail(request):
    """Record a measured value that is echoed next to the criterion's verdict."""
    entry = _entry(request.node)

    def note(text):
        if entry is not None:
            entry["details"].append(str(text))

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if rep.failed:
            entry["outcome"] = "FAIL"
        elif rep.skipped:
            entry["outcome"] = entry["outcome"] or "SKIP"
        elif entry["outcome"] is None:
            entry["outcome"] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number:2d} {e['outcome'] or 'NOT RUN':4s}  {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        tr.write_line(line)
