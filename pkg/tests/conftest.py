import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oamatch import synth
from oamatch.config import PipelineConfig

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return PipelineConfig(c_fine=8, c_coarse=16, backbone_width=8, l1=1, l2=1, l3=1)


@pytest.fixture(scope="session")
def pair32():
    return synth.synth_pair(32, 3, (4.0, 2.0))


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key, (ok, line) in results.items():
        terminalreporter.write_line(f"criterion {key:<3} {'PASS' if ok else 'FAIL'}  {line}")
