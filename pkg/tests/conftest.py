import time

import numpy as np
import pytest

from patrolmarl.gridmap import load_map, load_map_file

OPEN3 = """
0 0 0
0 5 0
0 0 0
"""

CORRIDOR = "0 0 0 0 5"


@pytest.fixture
def fig1():
    return load_map_file("builtin:fig1")


@pytest.fixture
def open3():
    return load_map(OPEN3)


@pytest.fixture
def corridor():
    return load_map(CORRIDOR)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, number, name):
        self.number, self.name, self.detail = number, name, ""

    def __enter__(self):
        self.started = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        elapsed = time.perf_counter() - self.started
        line = f"criterion {self.number:>2} {status}  {self.name} ({elapsed:.1f} s)"
        if self.detail:
            line += f"  [{self.detail}]"
        if exc_type is not None and exc is not None:
            line += f"  ({type(exc).__name__}: {str(exc).splitlines()[0][:120] if str(exc) else ''})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
