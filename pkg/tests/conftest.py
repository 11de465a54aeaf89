import numpy as np
import pytest

from driftforge.data import chronological_split, fit_rolling_stats, make_windows
from driftforge.manipulation import ManipulationContext
from driftforge.mixups import build_coint_matrix
from driftforge.synthetic import PanelSpec, synthetic_panel

LOOKBACK = 20


@pytest.fixture(scope="session")
def panel():
    return synthetic_panel(PanelSpec(n_stocks=3, n_timestamps=200), seed=7)


@pytest.fixture(scope="session")
def split(panel):
    return chronological_split(panel, (0.6, 0.2, 0.2))


@pytest.fixture(scope="session")
def stats(split):
    return fit_rolling_stats(split.train, window=LOOKBACK)


@pytest.fixture(scope="session")
def coint(split):
    return build_coint_matrix(split.train)


@pytest.fixture()
def ctx(split, stats, coint):
    return ManipulationContext(split.train, stats, coint, config_hash="test")


@pytest.fixture(scope="session")
def train_samples(split):
    return make_windows(split.train, LOOKBACK)


@pytest.fixture(scope="session")
def valid_samples(split):
    return make_windows(split.valid, LOOKBACK, origin=split.bounds[0])


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# acceptance criteria record one verdict line each; printed after the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture()
def verdict():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
