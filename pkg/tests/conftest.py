import pytest

from test_acceptance import CRITERIA, RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {CRITERIA[n]} | {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} NOT RUN: {CRITERIA[n]}")
