import pytest

from periodic_eval.market import CoefficientFunction as CF, MarketModel
from periodic_eval.sde import SimulationConfig
from periodic_eval.utility import UtilitySpec


@pytest.fixture
def const_model():
    """r = 0.02, mu = 0.1, sigma = 0.2 (theta = 0.4), M0 = 0.16."""
    return MarketModel(r=0.02, mu=CF.constant(0.1), sigma=CF.constant(0.2), M0=0.16)


@pytest.fixture
def ou_model():
    """OU factor with a sigmoid drift; theta ranges over (-0.1, 0.6)."""
    return MarketModel(r=0.02, mu=CF.sigmoid(0.0, 0.14, 0.0, 0.5), sigma=CF.constant(0.2),
                       b=CF.affine(0.0, -1.0), beta=CF.constant(0.5), rho=0.5, M0=0.36)


@pytest.fixture
def power_spec():
    return UtilitySpec.power(0.5, 0.5, 0.1, h=0.8)


@pytest.fixture
def log_spec():
    return UtilitySpec.log(0.5, 0.1, h=0.8)


@pytest.fixture
def small_sim():
    return SimulationConfig(n_paths=4096, n_steps=16, seed=7)


def within(est, target, k=3.0):
    return abs(est.mean - target) <= k * est.se + 1e-12
