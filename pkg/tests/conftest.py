import contextlib
import time

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


class _Record:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def check(num: int, name: str):
        rec = _Record()
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException:
            _RESULTS[num] = ("FAIL", name, rec.detail)
            print(f"criterion {num:2d} FAIL  {name}  {rec.detail}")
            raise
        rec.detail = f"{rec.detail}  ({time.perf_counter() - t0:.1f}s)".strip()
        _RESULTS[num] = ("PASS", name, rec.detail)
        print(f"criterion {num:2d} PASS  {name}  {rec.detail}")

    return check


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        status, name, detail = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d} {status}  {name}  {detail}")
