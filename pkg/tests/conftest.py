"""Shared pytest plumbing.

The acceptance tests record one line per criterion; the hook below prints
them as a dedicated section of the terminal summary so a plain `pytest -v`
run ends with an at-a-glance pass/fail table.
"""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def record_criterion():
    def record(number: int, name: str, passed: bool, detail: str):
        verdict = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append(f"criterion {number} ({name}): {verdict} - {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
