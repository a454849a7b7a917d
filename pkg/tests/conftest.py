import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = ""
        if rep.failed and rep.longrepr is not None:
            detail = str(getattr(rep.longrepr, "reprcrash", None) and rep.longrepr.reprcrash.message or "")
        _CRITERIA[n] = (title, rep.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[n]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        line = f"criterion {n:>2}: {status}  {title}"
        if detail:
            line += f"  ({detail.splitlines()[0][:120]})"
        terminalreporter.write_line(line)
