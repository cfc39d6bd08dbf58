import socket
import time

import pytest

from mmstream.broker import Broker


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_for(cond, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if cond():
            return True
        time.sleep(interval)
    return bool(cond())


@pytest.fixture
def broker():
    b = Broker("local").start()
    yield b
    b.stop()


@pytest.fixture
def mesh():
    """Two brokers on loopback linked to each other."""
    pa, pb = free_port(), free_port()
    a = Broker("A", ("127.0.0.1", pa), {"B": f"127.0.0.1:{pb}"}).start()
    b = Broker("B", ("127.0.0.1", pb), {"A": f"127.0.0.1:{pa}"}).start()
    assert wait_for(lambda: a.peer_hosts() == {"B"} and b.peer_hosts() == {"A"})
    yield a, b
    a.stop()
    b.stop()


# one PASS/FAIL line per acceptance criterion in the terminal summary

_criteria: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    name = marker.args[0] if marker.args else item.name
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _criteria.append(("PASS" if rep.passed else "FAIL", name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, name, detail in _criteria:
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  ({detail})" if detail else ""))
