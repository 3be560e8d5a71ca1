import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# (criterion number, passed, detail) for the acceptance summary
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome: ``with criterion(n) as note: ...``."""

    class _Recorder:
        def __call__(self, number: int):
            self.number = number
            self.detail = ""
            return self

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            ok = exc_type is None
            detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
            ACCEPTANCE.append((self.number, ok, detail))
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {self.number}: {detail}")
            return False

    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
