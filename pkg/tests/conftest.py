import pytest

_criteria = []
_setup_time = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "setup":
        _setup_time[item.nodeid] = rep.duration
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = ""
        if rep.failed:
            detail = str(rep.longrepr.reprcrash.message).splitlines()[0] if hasattr(
                rep.longrepr, "reprcrash") else "error"
        _criteria.append((mark.args[0], "PASS" if rep.passed else "FAIL", detail,
                          round(rep.duration + (_setup_time.get(item.nodeid, 0.0) if rep.when == "call" else 0.0), 1)))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail, secs in _criteria:
        line = f"{status}  {name}  ({secs}s)"
        if detail:
            line += f"  -- {detail[:160]}"
        terminalreporter.write_line(line)
