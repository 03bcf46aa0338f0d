import pytest

# criterion number -> (title, passed, notes)
_CRITERIA: dict[int, tuple[str, bool, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    _, ok, notes = _CRITERIA.get(n, (title, True, []))
    notes = notes + [f"{k}={v}" for k, v in item.user_properties if f"{k}={v}" not in notes]
    _CRITERIA[n] = (title, ok and rep.passed, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, notes = _CRITERIA[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if notes:
            line += "  [" + ", ".join(notes) + "]"
        terminalreporter.write_line(line)
