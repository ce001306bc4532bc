import math

import numpy as np
import pytest
from scipy import stats

from periodic_eval.errors import DomainError, UsageError
from periodic_eval.fixedpoint import (
    C_star,
    contraction_factor,
    log_fixed_point_constant,
    power_fixed_point_quadrature,
    value_function,
)
from periodic_eval.horizon import (
    HorizonPlan,
    SolutionTable,
    budget_chain,
    concatenate_optimal_wealth,
    d_series,
    evaluate_objective,
    log_optimal_policy,
    simulate_policy_path,
    supermartingale_check,
    tail_bound,
)
from periodic_eval.market import CoefficientFunction as CF, MarketModel
from periodic_eval.oneperiod import period_log_density, DualControl
from periodic_eval.sde import FeedbackPolicy, SimulationConfig, simulate_factor
from periodic_eval.utility import GridFunction, UtilitySpec, bind
from conftest import within


def plan(N, n_paths=4096, n_steps=4, seed=21):
    return HorizonPlan(N, SimulationConfig(n_paths=n_paths, n_steps=n_steps, seed=seed))


def test_plan_dates():
    p = plan(5)
    assert np.all(np.diff(p.dates) > 0) and p.dates[-1] == pytest.approx(5.0)
    with pytest.raises(UsageError):
        plan(0)


def test_log_optimal_policy(const_model, ou_model):
    assert log_optimal_policy(const_model, 0.0) == pytest.approx(2.0)
    flat = MarketModel(r=0.02, mu=CF.constant(0.02), sigma=CF.constant(0.3))
    assert log_optimal_policy(flat, 1.3) == 0.0
    ys = np.linspace(-2, 2, 5)
    expect = (ou_model.mu(ys) - 0.02) / ou_model.sigma(ys) ** 2
    assert np.allclose(log_optimal_policy(ou_model, ys), expect)
    bad = MarketModel(r=0.02, mu=CF.constant(0.1), sigma=CF.affine(0.0, 1.0, -1, 1))
    with pytest.raises(DomainError):
        log_optimal_policy(bad, -0.5)


def _power_optimum(model, spec):
    a, lam = power_fixed_point_quadrature(model, spec)
    return GridFunction.constant(a), SolutionTable.constant(lam)


def test_concatenated_ratios_stationary(const_model, power_spec):
    A, table = _power_optimum(const_model, power_spec)
    path = concatenate_optimal_wealth(const_model, power_spec, A, table, 1.0, 0.0, plan(6))
    lr = np.diff(path.logX, axis=0)
    for n in range(1, 6):
        assert stats.ks_2samp(lr[0], lr[n]).pvalue > 0.01


def test_log_optimum_lognormal(const_model, log_spec):
    path = concatenate_optimal_wealth(const_model, log_spec, 13.0, None, 2.0, 0.0, plan(1, n_paths=8192))
    lr = path.logX[1] - math.log(2.0)
    th = 0.4
    mean, sd = 0.02 + th * th / 2, th
    assert abs(lr.mean() - mean) <= 3 * sd / math.sqrt(lr.size)
    assert stats.kstest(lr, "norm", args=(mean, sd)).pvalue > 0.01


def test_one_period_reduction(ou_model, power_spec):
    p = plan(1, n_paths=1024, n_steps=8)
    eta = DualControl([0.0, 1.0], [-0.5, 0.5], [[0.1, 0.0], [0.0, 0.2]])
    table = SolutionTable(np.array([0.0]), np.array([3.0]), [eta])
    A = GridFunction(np.array([-1.0, 1.0]), np.array([9.0, 11.0]))
    path = concatenate_optimal_wealth(ou_model, power_spec, A, table, 1.0, 0.0, p)
    b = simulate_factor(ou_model, 0.0, p.sim, stream=p.stream(1))
    w = np.exp(period_log_density(ou_model, power_spec, eta, b))
    x = bind(power_spec, power_spec.h(b.Y[-1]), A(b.Y[-1])).inverse(3.0 * w)
    assert np.allclose(np.exp(path.logX[1]), x, rtol=1e-12)


def test_uncertified_refused(const_model, power_spec):
    A, table = _power_optimum(const_model, power_spec)
    bad = SolutionTable.constant(table.lambdas[0], certified=False)
    with pytest.raises(UsageError):
        concatenate_optimal_wealth(const_model, power_spec, A, bad, 1.0, 0.0, plan(2))
    concatenate_optimal_wealth(const_model, power_spec, A, bad, 1.0, 0.0, plan(2), allow_uncertified=True)


def test_budget_chain_power(const_model, power_spec):
    A, table = _power_optimum(const_model, power_spec)
    path = concatenate_optimal_wealth(const_model, power_spec, A, table, 1.0, 0.0, plan(4, n_paths=16384))
    for n, est in enumerate(budget_chain(path), start=1):
        assert within(est, 1.0), n


def test_log_cash_closed_form(const_model):
    s = UtilitySpec.log(0.5, 0.1, h=0.8)
    x = 2.0
    out = evaluate_objective(const_model, s, FeedbackPolicy.cash(), x, 0.0, plan(300, n_paths=64, n_steps=1))
    e = math.exp(0.1)
    closed = 0.5 / (e - 1) * math.log(x) + 0.8 / (e - 1) + 0.02 * (e - 0.5) / (e - 1) ** 2
    assert out.value.exact
    assert abs(out.value.mean - closed) <= 1e-10


def test_log_value_identity(const_model, log_spec):
    N = 150
    out = evaluate_objective(const_model, log_spec, "optimal", 1.5, 0.0, plan(N, n_paths=2048, n_steps=1))
    V = value_function(GridFunction.constant(log_fixed_point_constant(const_model, log_spec)), log_spec, 1.5, 0.0)
    assert abs(out.value.mean - V) <= out.tail_bound + 3 * out.value.se


def test_power_tail_geometric(const_model, power_spec):
    q = contraction_factor(const_model, power_spec, 0.16)
    t = [tail_bound(const_model, power_spec, 1.0, N, 0.16) for N in range(1, 6)]
    assert np.allclose(np.array(t[1:]) / np.array(t[:-1]), q, rtol=1e-12)
    log_t = [tail_bound(const_model, UtilitySpec.log(0.5, 0.1), 1.0, N, 0.16) for N in (10, 20, 40)]
    assert log_t[0] > log_t[1] > log_t[2] > 0


def test_power_scaling(ou_model, power_spec):
    p = plan(5, n_paths=1024)
    pol = FeedbackPolicy.table([0.0], [0.0], [[1.0]])
    a = evaluate_objective(ou_model, power_spec, pol, 1.0, 0.0, p)
    b = evaluate_objective(ou_model, power_spec, pol, 2.0, 0.0, p)
    assert b.value.mean == pytest.approx(a.value.mean * 2 ** 0.25, rel=1e-12)


def test_log_scaling(ou_model, log_spec):
    p = plan(5, n_paths=1024)
    pol = FeedbackPolicy.merton_log()
    a = evaluate_objective(ou_model, log_spec, pol, 1.0, 0.0, p)
    b = evaluate_objective(ou_model, log_spec, pol, 2.0, 0.0, p)
    disc = np.exp(-0.1 * np.arange(1, 6))
    assert b.value.mean - a.value.mean == pytest.approx(0.5 * math.log(2) * disc.sum(), rel=1e-10)
    A = GridFunction.constant(12.0)
    assert value_function(A, log_spec, 2.0, 0.0) - value_function(A, log_spec, 1.0, 0.0) == pytest.approx(
        C_star(0.5, 0.1, 1.0) * math.log(2))


def test_cash_drift_negative(const_model, power_spec):
    A, _ = _power_optimum(const_model, power_spec)
    rep = supermartingale_check(const_model, power_spec, A, FeedbackPolicy.cash(), plan(3, n_paths=4096))
    assert rep.supermartingale_ok and not rep.martingale_ok
    assert rep.max_z < -3


def test_log_optimum_martingale(ou_model, log_spec):
    from periodic_eval.fixedpoint import FixedPointConfig, iterate_to_fixed_point
    from periodic_eval.oneperiod import SolverConfig
    sim = SimulationConfig(n_paths=4096, n_steps=8, seed=2)
    res = iterate_to_fixed_point(ou_model, log_spec, FixedPointConfig(
        y_grid=np.linspace(-2, 2, 9), tol=1e-6, solver=SolverConfig(sim=sim, with_primal=False)))
    rep = supermartingale_check(ou_model, log_spec, res.A_star, "optimal", plan(3, n_paths=4096, n_steps=8),
                                A_se=GridFunction(res.A_star.y, res.A_se))
    assert rep.martingale_ok, rep.to_dict()


def test_no_premium_cash_is_martingale():
    m = MarketModel(r=0.02, mu=CF.constant(0.02), sigma=CF.constant(0.2), M0=0.0)
    s = UtilitySpec.power(0.5, 0.5, 0.1, h=0.8)
    A, _ = _power_optimum(m, s)
    rep = supermartingale_check(m, s, A, FeedbackPolicy.cash(), plan(3, n_paths=512))
    assert rep.martingale_ok
    assert max(abs(r["drift"]) for r in rep.rows) < 1e-9


def test_bin_merging(ou_model, log_spec):
    rep = supermartingale_check(ou_model, log_spec, GridFunction.constant(13.0), FeedbackPolicy.cash(),
                                plan(2, n_paths=400), n_bins=8, min_count=100)
    assert rep.merged_bins > 0
    later = [r for r in rep.rows if r["n"] == 1]
    assert len(later) > 1 and all(r["count"] >= 100 for r in later)
    assert sum(r["count"] for r in later) == 400


def test_d_series_start(const_model, power_spec):
    path = simulate_policy_path(const_model, FeedbackPolicy.cash(), 2.0, 0.0, plan(2, n_paths=16))
    D = d_series(power_spec, GridFunction.constant(10.0), path)
    assert np.allclose(D[0], 2 * 10.0 * 2.0 ** 0.25)
