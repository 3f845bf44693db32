import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quantcache.experiment import Lab, calibration_pool  # noqa: E402


@pytest.fixture(scope="session")
def lab():
    return Lab.build()


@pytest.fixture(scope="session")
def pool(lab):
    # denoiser inputs of 64 cached analytic trajectories: 3200 samples
    return calibration_pool(lab, range(1000, 1064), cache_interval=5)


@pytest.fixture(scope="session")
def tap_calibration(lab, pool):
    from quantcache.experiment import select
    from quantcache.tap import TapConfig

    idx, _ = select(pool, "tap", TapConfig(), lab.T)
    return pool.subset(idx)


@pytest.fixture(scope="session")
def w4a4(lab, tap_calibration):
    """Default quantized surrogate (4-bit weights and activations, TAP calibration)."""
    from quantcache.experiment import fit_quantized

    return fit_quantized(lab, tap_calibration, 4, 4)[1]


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
