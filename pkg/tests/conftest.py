"""Shared pytest plumbing.

The acceptance suite records one PASS/FAIL line per release criterion; echo
them in the terminal summary so they stay visible under output capture.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
