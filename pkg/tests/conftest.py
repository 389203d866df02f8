import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = {}


def record(n: int, title: str, ok: bool, detail: str):
    """Stash one acceptance outcome for the terminal summary."""
    ACCEPTANCE[n] = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
