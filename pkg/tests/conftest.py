import pytest

from sdlss.data import find_fashion_mnist

_OUTCOMES = {}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", help="run the desk-scale slow tier")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    if find_fashion_mnist(None, "train") is None:
        reason = "dataset unavailable: set SDLSS_DATA_DIR and pass --runslow"
    else:
        reason = "slow tier: pass --runslow"
    skip = pytest.mark.skip(reason=reason)
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    number, title = mark.args
    if rep.skipped:
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        status = ("SKIP", reason.removeprefix("Skipped: "))
    else:
        status = ("FAIL" if rep.failed else "PASS", "")
    prev = _OUTCOMES.get(number)
    if prev is None or prev[1][0] == "PASS":
        _OUTCOMES[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, (status, note) = _OUTCOMES[number]
        line = f"criterion {number:2d}  {status}  {title}"
        terminalreporter.write_line(line + (f"  [{note}]" if note else ""))
