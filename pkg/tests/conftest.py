import numpy as np
import pytest

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict(request):
    """Record a one-line criterion verdict for the end-of-run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, passed, detail):
        lines.append((number, f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
