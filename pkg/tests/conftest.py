import time
from contextlib import contextmanager

import pytest

_ACCEPTANCE: dict[int, str] = {}


class Criterion:
    """Times one acceptance criterion and records a single pass/fail line."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number = number
        self.title = title
        self.limit_s = limit_s
        self.note = ""

    def _record(self, ok: bool, elapsed: float, note: str):
        status = "PASS" if ok else "FAIL"
        line = f"AC{self.number:<2} {status}  {self.title}  [{elapsed:.2f} s / limit {self.limit_s:g} s]"
        if note:
            line += f"  {note}"
        _ACCEPTANCE[self.number] = line
        print(line)


@pytest.fixture
def criterion():
    @contextmanager
    def run(number: int, title: str, limit_s: float):
        c = Criterion(number, title, limit_s)
        t0 = time.perf_counter()
        try:
            yield c
        except BaseException as exc:
            first = (str(exc).strip().splitlines() or [""])[0]
            c._record(False, time.perf_counter() - t0, c.note or f"{type(exc).__name__}: {first}")
            raise
        elapsed = time.perf_counter() - t0
        c._record(elapsed < limit_s, elapsed, c.note)
        assert elapsed < limit_s, f"AC{number} took {elapsed:.2f} s, limit {limit_s} s"

    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])
