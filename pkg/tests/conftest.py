"""Shared pytest plumbing.

The acceptance tests each record one summary line; the hook below replays
them at the end of the run so the pass/fail ledger is visible without -s.
"""

import pytest

acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    def record(n: int, ok: bool, detail: str) -> None:
        line = f"[ACCEPTANCE {n}] {'PASS' if ok else 'FAIL'} {detail}"
        acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
