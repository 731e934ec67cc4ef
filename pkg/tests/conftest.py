import re

import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; shown in the terminal summary."""
    number = int(re.match(r"test_criterion_(\d+)", request.node.name).group(1))

    def record(ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS[number] = line
        print(line)
        return ok

    yield record
    if number not in _RESULTS:
        _RESULTS[number] = f"criterion {number:2d}  FAIL  did not complete"


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[n])
