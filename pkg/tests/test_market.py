import math

import numpy as np
import pytest

from periodic_eval.errors import DomainError, UsageError
from periodic_eval.market import (
    CoefficientFunction as CF,
    MarketModel,
    check_standing_assumption,
    default_factor_grid,
    effective_M0,
    estimate_M0,
    theta,
    zeta,
)
from periodic_eval.utility import UtilitySpec


def test_theta_examples(const_model):
    assert theta(const_model, 0.0) == pytest.approx(0.4, abs=1e-15)
    flat = MarketModel(r=0.03, mu=CF.constant(0.03), sigma=CF.affine(0.2, 0.1, -1, 1))
    assert theta(flat, 0.7) == 0.0
    tanh = MarketModel(r=0.02, mu=CF.sigmoid(-0.02, 0.06, 0.0, 0.5), sigma=CF.constant(0.2))
    assert theta(tanh, 0.0) == pytest.approx(0.0, abs=1e-15)


def test_sigmoid_matches_tanh_form():
    f = CF.sigmoid(-0.02, 0.06, 0.0, 0.5)
    y = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(f(y), 0.02 + 0.04 * np.tanh(y), atol=1e-15)


def test_theta_rejects_nonpositive_volatility():
    m = MarketModel(r=0.0, mu=CF.constant(0.1), sigma=CF.affine(0.1, 0.1))
    with pytest.raises(DomainError):
        theta(m, -2.0)


def test_zeta_examples():
    assert zeta(0.05, 0.04, 0.0) == 0.0
    assert zeta(0.05, 0.04, 0.5) == pytest.approx(0.045, abs=1e-15)
    assert zeta(0.02, 0.16, 0.25) == pytest.approx(0.0316667, abs=1e-6)
    with pytest.raises(DomainError):
        zeta(0.02, 0.16, 1.0)


def test_zeta_increasing_and_convex():
    rng = np.random.default_rng(3)
    for _ in range(200):
        r, M0 = rng.uniform(0, 0.1), rng.uniform(0, 1)
        x1, x2 = np.sort(rng.uniform(0, 0.99, 2))
        assert zeta(r, M0, x1) <= zeta(r, M0, x2)
        assert zeta(r, M0, 0.5 * (x1 + x2)) <= 0.5 * (zeta(r, M0, x1) + zeta(r, M0, x2)) + 1e-15


def test_estimate_M0_examples(const_model):
    assert estimate_M0(const_model, [0.0, 1.0]) == pytest.approx(0.16, abs=1e-15)
    flat = MarketModel(r=0.02, mu=CF.constant(0.02), sigma=CF.constant(0.2))
    assert estimate_M0(flat, [-1.0, 1.0]) == 0.0
    tanh = MarketModel(r=0.02, mu=CF.sigmoid(-0.02, 0.06, 0.0, 0.5), sigma=CF.constant(0.2))
    # (0.04 tanh 5 / 0.2)^2; the grid includes the endpoints
    assert estimate_M0(tanh, np.linspace(-5, 5, 101)) == pytest.approx((0.04 * math.tanh(5) / 0.2) ** 2, rel=1e-12)
    assert estimate_M0(tanh, np.linspace(-5, 5, 101)) == pytest.approx(0.0399927, abs=1e-7)
    with pytest.raises(UsageError):
        estimate_M0(const_model, [])


def test_theta_squared_below_estimate(ou_model):
    g = np.linspace(-3, 3, 61)
    assert np.all(theta(ou_model, g) ** 2 <= estimate_M0(ou_model, g))


def test_supplied_M0_must_dominate_grid():
    m = MarketModel(r=0.02, mu=CF.constant(0.1), sigma=CF.constant(0.2), M0=0.1)
    with pytest.raises(UsageError):
        effective_M0(m, [0.0])
    rep = check_standing_assumption(m, UtilitySpec.power(0.5, 0.5, 0.1), [0.0])
    assert not rep.passed


def test_standing_assumption_examples(const_model):
    rep = check_standing_assumption(const_model, UtilitySpec.power(0.5, 0.5, 0.1))
    assert rep.passed and rep.margin == pytest.approx(0.0683333, abs=1e-6)
    rep = check_standing_assumption(const_model, UtilitySpec.power(0.5, 1.0, 0.001))
    assert rep.passed and rep.zeta_value == 0.0
    rep = check_standing_assumption(const_model, UtilitySpec.power(0.5, 0.5, 0.03))
    assert not rep.passed and rep.margin < 0
    assert check_standing_assumption(const_model, UtilitySpec.log(0.5, 0.01)).passed


def test_partially_vanishing_beta_fails():
    m = MarketModel(r=0.02, mu=CF.constant(0.1), sigma=CF.constant(0.2), beta=CF.affine(0, 1, 0, 1), M0=0.16)
    rep = check_standing_assumption(m, UtilitySpec.log(0.5, 0.1), [-1.0, 0.5])
    assert not rep.passed


@pytest.mark.parametrize("f", [CF.constant(1.5), CF.affine(0.1, 0.2, -1, 2), CF.sigmoid(0.0, 1.0, 0.3, 0.7),
                               CF.table([0.0, 1.0, 3.0], [1.0, 2.0, 0.5])])
def test_coefficient_round_trip_and_continuity(f):
    g = CF.from_dict(f.to_dict())
    y = np.linspace(-5, 5, 101)
    np.testing.assert_array_equal(f(y), g(y))
    off = y + 0.0123
    for eps in (1e-3, 1e-6, 1e-9):
        assert np.max(np.abs(f(off + eps) - f(off))) < 10 * eps + 1e-15


def test_table_clamps_outside_knots():
    f = CF.table([0.0, 1.0], [2.0, 4.0])
    assert f(-10.0) == 2.0 and f(10.0) == 4.0 and f(0.5) == 3.0


def test_default_grid_is_centred_and_increasing(ou_model):
    g = default_factor_grid(ou_model, 0.0, n=41, width=5.0)
    assert g.size == 41 and np.all(np.diff(g) > 0)
    # stationary sd of the OU factor is 0.5 / sqrt(2)
    assert g[-1] == pytest.approx(5 * 0.5 / math.sqrt(2), rel=1e-6)
