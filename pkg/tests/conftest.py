import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stethlink.chain import AudioBuffer  # noqa: E402

FS = 4000


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_buf(samples, fs=FS):
    return AudioBuffer(fs, samples)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None and report.when == "call":
        number, title = marker.args
        verdict = "PASS" if report.passed else "FAIL"
        item.config.stash[_ACCEPTANCE].append((number, f"criterion {number:>2} {verdict}  {title} ({report.duration:.2f} s)"))
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_ACCEPTANCE, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
