"""Shared pytest plumbing: one PASS/FAIL line per acceptance criterion.

Each ``test_a<n>`` in test_acceptance.py calls :func:`record_acceptance`
with the numbers it measured before asserting on them; a terminal-summary
hook then prints exactly one line per criterion so the gate can be read
off the bottom of any pytest run.
"""

from __future__ import annotations

import re

_DETAILS: dict[str, str] = {}
_OUTCOMES: dict[str, bool] = {}

_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_a(\d+)")


def record_acceptance(criterion: str, detail: str) -> None:
    """Stash the measured numbers for the summary line of one criterion."""
    _DETAILS[criterion.upper()] = detail


def pytest_runtest_logreport(report):
    match = _ACCEPTANCE.search(report.nodeid)
    if match is None:
        return
    criterion = f"A{match.group(1)}"
    if report.when == "call":
        _OUTCOMES[criterion] = report.passed
    elif report.failed:  # setup error or teardown failure
        _OUTCOMES[criterion] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_OUTCOMES, key=lambda c: int(c[1:])):
        status = "PASS" if _OUTCOMES[criterion] else "FAIL"
        detail = _DETAILS.get(criterion)
        line = f"{criterion} {status}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
