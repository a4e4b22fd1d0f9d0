import random
import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def _free_range(n, rng):
    for _ in range(200):
        base = rng.randrange(20000, 60000 - n)
        socks = []
        try:
            for i in range(n):
                s = socket.socket()
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                s.bind(("127.0.0.1", base + i))
                socks.append(s)
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
        return base
    raise RuntimeError("no free port range")


_rng = random.Random()


@pytest.fixture
def base_port():
    """Start of 16 consecutive free loopback ports."""
    return _free_range(16, _rng)


_criteria = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(label)`` passes unless the test fails."""
    entry = {"label": None, "node": request.node}
    _criteria.append(entry)

    def record(label):
        entry["label"] = label

    yield record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.acceptance_passed = rep.passed


def pytest_terminal_summary(terminalreporter):
    lines = [e for e in _criteria if e["label"]]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for e in lines:
        ok = getattr(e["node"], "acceptance_passed", False)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {e['label']}")
