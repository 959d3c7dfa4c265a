import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from xtransfer import bench, zoo  # noqa: E402


@pytest.fixture(scope="session")
def benchmark():
    """Reference synthetic benchmark: two 16-class image sources, 1D 5-class target."""
    return bench.make_synthetic_benchmark(0)


@pytest.fixture(scope="session")
def small_source():
    return zoo.generate_synthetic_source(3, 6, (3, 16, 16), 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
