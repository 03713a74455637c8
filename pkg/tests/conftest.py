import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fuselab import tensor as T
from fuselab.u2net import ModelConfig

settings.register_profile("fuselab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fuselab")


@pytest.fixture(autouse=True)
def _clean_faults():
    yield
    T.clear_faults()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(pan_channels=1, bands=4, width=8, head_width=4, precision="f64", seed=3)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, title, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
