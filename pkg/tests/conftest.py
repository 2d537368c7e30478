import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.fixture
def detail(request):
    """Free-form measurements a criterion test wants echoed in its summary line."""
    d = {}
    request.node._criterion_detail = d
    return d


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    _RESULTS[number] = {
        "title": title,
        "passed": rep.passed,
        "detail": getattr(item, "_criterion_detail", {}),
    }


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        status = "PASS" if r["passed"] else "FAIL"
        info = ", ".join(f"{k}={v}" for k, v in r["detail"].items())
        tr.write_line(f"[{status}] criterion {number}: {r['title']}" + (f" ({info})" if info else ""))
