import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(tryfirst=True)
def pytest_collection_modifyitems(items):
    # register before -m / -k deselection so skipped criteria still get a line
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "detail": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "detail": []})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
        entry["detail"].append(item.name)
    detail = getattr(item, "criterion_detail", None)
    if detail and rep.when == "call":
        entry["detail"].append(detail)


@pytest.fixture
def report(request):
    """Attach a one-line measurement to the acceptance summary of this test."""

    def note(text: str):
        request.node.criterion_detail = text

    return note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] or not e["ok"] else "NOT RUN")
        extra = f"  [{'; '.join(e['detail'])}]" if e["detail"] else ""
        tr.write_line(f"criterion {n:2d}: {status}  {e['title']}{extra}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
