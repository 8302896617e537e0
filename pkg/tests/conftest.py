"""Shared pytest hooks.

The acceptance tests register one PASS/FAIL line each in GATE_LINES; the
terminal-summary hook prints them after the run so the gate outcome is
visible in any log, independent of output capture.
"""

GATE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for line in GATE_LINES:
            terminalreporter.line(line)
