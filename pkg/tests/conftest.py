"""Shared pytest plumbing: the release-gate summary block.

The acceptance tests record one line per criterion through
``record_gate_line``; this hook replays them after the test summary so
the gate status is visible in any pytest run, capture mode regardless.
"""

_gate_lines = []


def record_gate_line(line: str):
    _gate_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _gate_lines:
        terminalreporter.section("release gate")
        for line in _gate_lines:
            terminalreporter.line(line)
