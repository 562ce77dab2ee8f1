import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from agora.pricing import build_fbp, load_catalog  # noqa: E402
from agora.workload import Trace  # noqa: E402
from agora.workload.fixtures import load_fixture  # noqa: E402

_acceptance: list[tuple[str, str]] = []


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@pytest.fixture(scope="session")
def curve():
    return build_fbp(4, [(2.039, 5.06), (3.35, 15)])


@pytest.fixture(scope="session")
def fixture_dist():
    return load_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def const_trace(bw: float, duration_us: float, gpu: str = "H100") -> Trace:
    return Trace(gpu, [duration_us], [bw], [0.5], [0.5])


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _acceptance.append((name, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"[{outcome}] {name}")
