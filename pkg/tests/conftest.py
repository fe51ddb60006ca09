"""Shared test plumbing: collects acceptance-criterion verdicts and prints
them as one line each in the terminal summary."""

from contextlib import contextmanager

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Context manager recording `criterion N: PASS|FAIL — description`."""

    @contextmanager
    def _criterion(num, desc):
        try:
            yield
        except BaseException:
            line = f"criterion {num:2d}: FAIL - {desc}"
            ACCEPTANCE_LINES.append(line)
            print(line)
            raise
        line = f"criterion {num:2d}: PASS - {desc}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(ACCEPTANCE_LINES)):
            terminalreporter.write_line(line)
