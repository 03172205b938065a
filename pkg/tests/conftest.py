import re

import pytest

RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """``report(ok, detail)`` records and prints the pass/fail line for the criterion in the test name."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))

    def report(ok: bool, detail: str) -> bool:
        RESULTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(RESULTS[number])
        return ok

    yield report
    RESULTS.setdefault(number, f"criterion {number:2d}: FAIL  raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
