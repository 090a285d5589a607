import sys
from pathlib import Path

import pytest

# make the oracle helpers importable as plain modules
sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion; the summary prints them in order."""

    def record(number: int, ok: bool | None, detail: str) -> bool:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        _ACCEPTANCE[number] = f"criterion {number:2d}: {status}  {detail}"
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
