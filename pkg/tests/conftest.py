import pytest

CRITERIA = {}
NOTES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test decides")


@pytest.fixture
def note():
    """Append a line to the acceptance report printed after the run."""
    return NOTES.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    ok = rep.passed and CRITERIA.get(n, (title, True))[1]
    CRITERIA[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok = CRITERIA[n]
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
    for line in NOTES:
        tr.write_line(line)
