"""Shared fixtures: acceptance-criterion bookkeeping.

Each acceptance test reports its verdict through record_criterion before
asserting, so the terminal summary always carries one PASS/FAIL line per
criterion even when a run aborts partway through the suite.
"""

import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


def _record(number: int, name: str, passed: bool, detail: str = ""):
    _RESULTS[number] = (name, bool(passed), detail)


@pytest.fixture
def record_criterion():
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, passed, detail = _RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        line = f"CRITERION {number} [{name}]: {verdict}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
