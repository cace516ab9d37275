import numpy as np
import pytest

from te_meanvar.market import PenaltySpec, reference_weights, risk_aversion_for_target, study_market
from te_meanvar.riccati import TimeGrid, solve_riccati


@pytest.fixture(scope="session")
def model():
    return study_market()


@pytest.fixture(scope="session")
def mu(model):
    return risk_aversion_for_target(model, x0=1.0, target_return=0.20, T=1.0)


@pytest.fixture(scope="session")
def w_ew(model):
    return reference_weights("equal-weights", model)


@pytest.fixture(scope="session")
def sol_small(model, mu, w_ew):
    """gamma = mu / 100 with the equal-weights reference."""
    return solve_riccati(model, PenaltySpec.scalar(mu / 100, w_ew, mu), TimeGrid(10_000, 1.0))


@pytest.fixture(scope="session")
def sol_zero(model, mu, w_ew):
    return solve_riccati(model, PenaltySpec.scalar(0.0, w_ew, mu), TimeGrid(10_000, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
