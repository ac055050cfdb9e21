import contextlib
import time

import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the end-of-run summary."""
    results = request.config.stash[ACCEPTANCE]

    @contextlib.contextmanager
    def record(number: int, title: str):
        detail = {}
        start = time.perf_counter()
        try:
            yield detail
        except BaseException:
            results[number] = ("FAIL", title, detail, time.perf_counter() - start)
            raise
        results[number] = ("PASS", title, detail, time.perf_counter() - start)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail, secs = results[number]
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title} ({secs:.1f} s) {info}".rstrip())
