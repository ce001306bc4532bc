import math

import numpy as np
import pytest

from periodic_eval.errors import UsageError
from periodic_eval.market import CoefficientFunction as CF, MarketModel
from periodic_eval.mc import estimate
from periodic_eval.oneperiod import DualControl
from periodic_eval.sde import (
    FeedbackPolicy,
    SimulationConfig,
    brownian_increments,
    doleans_exponential,
    dump_bundle,
    export_terminal_csv,
    load_bundle,
    simulate_dual_density,
    simulate_factor,
    simulate_wealth,
)
from conftest import within


def test_degenerate_factor_is_constant(const_model, small_sim):
    b = simulate_factor(const_model, 0.3, small_sim)
    assert np.all(b.Y == 0.3)


def test_ode_limit():
    m = MarketModel(r=0.0, mu=CF.constant(0.0), sigma=CF.constant(0.2), b=CF.affine(0.0, -1.0))
    errs = []
    for K in (32, 64, 128):
        b = simulate_factor(m, 1.5, SimulationConfig(n_paths=4, n_steps=K))
        errs.append(abs(b.Y[-1, 0] - 1.5 * math.exp(-1.0)))
    assert errs[0] < 0.02
    # first-order scheme: halving the step roughly halves the error
    assert errs[1] / errs[0] == pytest.approx(0.5, abs=0.05)
    assert errs[2] / errs[1] == pytest.approx(0.5, abs=0.05)


def test_ou_mean():
    m = MarketModel(r=0.0, mu=CF.constant(0.0), sigma=CF.constant(0.2), b=CF.affine(0.0, -1.0),
                    beta=CF.constant(1.0))
    b = simulate_factor(m, 1.0, SimulationConfig(n_paths=2 ** 15, n_steps=64, seed=11))
    # Euler mean is (1 - dt)^K; the continuous-time value differs by O(dt)
    assert within(estimate(b.Y[-1]), (1 - 1 / 64) ** 64)
    assert abs(np.mean(b.Y[-1]) - math.exp(-1)) < 0.02


def test_cash_wealth_exact(const_model, small_sim):
    b = simulate_wealth(const_model, FeedbackPolicy.cash(), 2.0, simulate_factor(const_model, 0.0, small_sim))
    np.testing.assert_allclose(b.X, 2.0 * np.exp(const_model.r * b.t)[:, None] * np.ones((1, b.n_paths)),
                               rtol=1e-14)


def test_gbm_mean(const_model):
    b = simulate_factor(const_model, 0.0, SimulationConfig(n_paths=2 ** 15, n_steps=16, seed=2))
    one = FeedbackPolicy.table([0.0], [0.0], [[1.0]])
    b = simulate_wealth(const_model, one, 1.0, b)
    assert within(estimate(b.X[-1]), math.exp(0.1))
    assert np.all(b.X > 0)


def test_wealth_positive_and_clamped(ou_model, small_sim):
    b = simulate_factor(ou_model, 0.0, small_sim)
    wild = FeedbackPolicy.table([0.0, 1.0], [-1.0, 1.0], [[-50.0, 50.0], [50.0, -50.0]], pi_max=20.0)
    with pytest.warns(RuntimeWarning):
        out = simulate_wealth(ou_model, wild, 1.0, b)
    assert out.n_clamped > 0 and np.all(out.X > 0)


def test_zero_density_is_one():
    m = MarketModel(r=0.02, mu=CF.constant(0.02), sigma=CF.constant(0.2))
    b = simulate_dual_density(m, None, simulate_factor(m, 0.0, SimulationConfig(n_paths=64, n_steps=8)))
    assert np.all(b.Z == 1.0)


def test_density_martingale_and_moments(const_model, ou_model):
    cfg = SimulationConfig(n_paths=2 ** 15, n_steps=32, seed=5)
    b = simulate_dual_density(const_model, None, simulate_factor(const_model, 0.0, cfg))
    lz = b.logZ[-1]
    assert within(estimate(b.Z[-1]), 1.0)
    assert within(estimate(lz), -0.08)
    n = lz.size
    var = np.var(lz, ddof=1)
    # SE of the sample variance for Gaussian data
    assert abs(var - 0.16) <= 3 * 0.16 * math.sqrt(2 / (n - 1))
    eta = DualControl([0.0, 1.0], [-1.0, 1.0], [[0.5, -0.5], [1.0, 0.2]])
    b = simulate_dual_density(ou_model, eta, simulate_factor(ou_model, 0.0, cfg))
    assert within(estimate(b.Z[-1]), 1.0) and np.all(b.Z > 0)


def test_doleans_exponential():
    cfg = SimulationConfig(n_paths=2 ** 15, n_steps=16, seed=9)
    dW1, dW2 = brownian_increments(cfg)
    assert np.all(doleans_exponential(dW1, 0.0, cfg.dt) == 1.0)
    e = doleans_exponential(dW1, 0.7, cfg.dt)
    assert e.shape == (17, cfg.n_paths) and np.all(e[0] == 1.0)
    assert within(estimate(e[-1]), 1.0)


def test_product_identity(ou_model):
    cfg = SimulationConfig(n_paths=512, n_steps=16, seed=4)
    b = simulate_factor(ou_model, 0.2, cfg)
    eta = DualControl([0.0], [-1.0, 1.0], [[0.3, -0.4]])
    th = ou_model.theta(b.Y[:-1])
    ev = np.stack([eta(t, y) for t, y in zip(b.t[:-1], b.Y[:-1])])
    prod = doleans_exponential(b.dW1, -th, b.dt) * doleans_exponential(b.dW2, ev, b.dt)
    z = simulate_dual_density(ou_model, eta, b).Z
    np.testing.assert_allclose(prod, z, rtol=1e-12)


def test_reproducible_and_prefix_stable(ou_model):
    a = simulate_factor(ou_model, 0.0, SimulationConfig(n_paths=5000, n_steps=8, seed=123))
    b = simulate_factor(ou_model, 0.0, SimulationConfig(n_paths=5000, n_steps=8, seed=123))
    np.testing.assert_array_equal(a.Y, b.Y)
    c = simulate_factor(ou_model, 0.0, SimulationConfig(n_paths=9000, n_steps=8, seed=123))
    np.testing.assert_array_equal(a.dW1, c.dW1[:, :5000])
    d = simulate_factor(ou_model, 0.0, SimulationConfig(n_paths=5000, n_steps=8, seed=124))
    assert not np.array_equal(a.dW1, d.dW1)
    e = simulate_factor(ou_model, 0.0, SimulationConfig(n_paths=5000, n_steps=8, seed=123), stream=1)
    assert not np.array_equal(a.dW1, e.dW1)


def test_antithetic_pairs():
    cfg = SimulationConfig(n_paths=1000, n_steps=4, seed=1, antithetic=True)
    dW1, dW2 = brownian_increments(cfg)
    np.testing.assert_array_equal(dW1[:, :500], -dW1[:, 500:])
    with pytest.raises(UsageError):
        SimulationConfig(n_paths=1001, antithetic=True)


def test_dump_round_trip(tmp_path, ou_model):
    cfg = SimulationConfig(n_paths=300, n_steps=6, seed=77)
    b = simulate_factor(ou_model, 0.1, cfg, with_price=True)
    b = simulate_wealth(ou_model, FeedbackPolicy.merton_log(), 1.0, b)
    p = tmp_path / "paths.bin"
    dump_bundle(b, p)
    assert p.read_bytes()[:4] == b"PERI"
    c = load_bundle(p)
    for f in ("dW1", "dW2", "Y", "logS", "logX"):
        np.testing.assert_array_equal(getattr(b, f), getattr(c, f))
    assert c.logZ is None and c.seed == 77 and c.y0 == 0.1
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(UsageError):
        load_bundle(bad)
    export_terminal_csv(b, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "path,Y_T,S_T,X_T" and len(lines) == 301


def test_policy_kinds(const_model):
    y = np.array([0.0, 1.0])
    assert np.all(FeedbackPolicy.zero()(0.0, y, const_model) == 0.0)
    np.testing.assert_allclose(FeedbackPolicy.merton_log()(0.0, y, const_model), 2.0)
    np.testing.assert_allclose(FeedbackPolicy.merton_power(0.5)(0.0, y, const_model), 4.0)
    with pytest.raises(UsageError):
        FeedbackPolicy.table([0.0, 1.0], [0.0], [[1.0]])
