import math

import numpy as np
import pytest

from periodic_eval.errors import DomainError
from periodic_eval.fixedpoint import (
    C_star,
    FixedPointConfig,
    apply_Psi_log,
    apply_Psi_power,
    check_bounds_log,
    check_bounds_power,
    contraction_factor,
    iterate_to_fixed_point,
    log_A_bounds,
    log_fixed_point_constant,
    log_psi_coefficient,
    measure_contraction,
    power_A_bounds,
    power_fixed_point_quadrature,
    value_bounds,
    value_bounds_check,
    value_function,
)
from periodic_eval.utility import GridFunction
from periodic_eval.market import CoefficientFunction as CF, MarketModel
from periodic_eval.oneperiod import SolverConfig, quadrature_one_period
from periodic_eval.sde import SimulationConfig
from periodic_eval.utility import UtilitySpec


def cfg_for(grid, n_paths=4096, n_steps=8, seed=1, **kw):
    sim = SimulationConfig(n_paths=n_paths, n_steps=n_steps, seed=seed)
    return FixedPointConfig(y_grid=np.asarray(grid, float), solver=SolverConfig(sim=sim, with_primal=False), **kw)


def test_C_star_examples():
    assert C_star(1.0, 0.1, 1.0) == 0.0
    assert C_star(0.5, 0.1, 1.0) == pytest.approx(4.75416, abs=1e-5)
    assert C_star(0.5, 0.1, 2.0) == pytest.approx(2.25833, abs=1e-5)
    with pytest.raises(DomainError):
        C_star(0.5, 0.0, 1.0)


def test_log_coefficient_gamma_one():
    s = UtilitySpec.log(1.0, 0.1, tau=1.5)
    assert log_psi_coefficient(s) == pytest.approx(math.exp(-0.15), rel=1e-14)


def test_apply_Psi_log_example(const_model, log_spec):
    cfg = cfg_for([-1.0, 0.0, 1.0])
    out = apply_Psi_log(GridFunction.constant(0.0), const_model, log_spec, cfg)
    assert np.allclose(out.values.values, 1.244529, atol=1e-6)


def test_apply_Psi_log_affine(ou_model, log_spec):
    cfg = cfg_for(np.linspace(-1, 1, 5), seed=3)
    A = GridFunction(cfg.y_grid, 10 + np.sin(cfg.y_grid))
    a = apply_Psi_log(A, ou_model, log_spec, cfg)
    b = apply_Psi_log(GridFunction(A.y, A.values + 2.5), ou_model, log_spec, cfg)
    assert np.allclose(b.values.values - a.values.values, math.exp(-0.1) * 2.5, atol=1e-12)


def test_power_psi_constant_matches_quadrature(const_model):
    s = UtilitySpec.power(0.5, 0.5, 0.1, h=1.0)
    cfg = cfg_for([-1.0, 0.0, 1.0], n_paths=2 ** 15)
    out = apply_Psi_power(GridFunction.constant(5.0), const_model, s, cfg)
    val, _ = quadrature_one_period(const_model, s, 5.0)
    target = 0.5 * math.exp(-0.1) * val
    assert np.allclose(out.values.values, out.values.values[0])
    assert abs(out.values.values[0] - target) <= 3 * out.se[0]


def test_power_psi_zero_merton(const_model):
    s = UtilitySpec.power(0.5, 1.0, 0.1, h=1.0)
    cfg = cfg_for([0.0], n_paths=2 ** 15, seed=5)
    out = apply_Psi_power(GridFunction.constant(0.0), const_model, s, cfg)
    th = 0.4
    z_exact = 0.02 * 0.5 + 0.5 * th * th / (2 * 0.5)
    assert abs(out.values.values[0] - math.exp(z_exact - 0.1)) <= 3 * out.se[0] + 1e-12


def test_power_psi_monotone(ou_model, power_spec):
    cfg = cfg_for(np.linspace(-1, 1, 3), seed=7)
    lo = GridFunction(cfg.y_grid, np.array([8.0, 9.0, 10.0]))
    hi = GridFunction(cfg.y_grid, lo.values + 1.0)
    a = apply_Psi_power(lo, ou_model, power_spec, cfg)
    b = apply_Psi_power(hi, ou_model, power_spec, cfg)
    assert np.all(b.values.values >= a.values.values - 3 * np.hypot(a.se, b.se))


def test_log_fixed_point_constant(const_model, log_spec):
    cfg = cfg_for([-1.0, 0.0, 1.0], tol=1e-8)
    res = iterate_to_fixed_point(const_model, log_spec, cfg)
    assert res.converged and res.certified
    assert np.allclose(res.A_star.values, 13.0779, atol=1e-3)
    assert log_fixed_point_constant(const_model, log_spec) == pytest.approx(13.077918, abs=1e-6)
    assert check_bounds_log(res, const_model, log_spec).passed
    lo, hi = log_A_bounds(const_model, log_spec, 0.16)
    assert lo == pytest.approx(8.7009, abs=1e-4) and hi == pytest.approx(14.9796, abs=1e-4)
    bad = GridFunction(res.A_star.y, 10 * res.A_star.values)
    assert not check_bounds_log(bad, const_model, log_spec, M0=0.16).passed


def test_log_bounds_collapse_without_premium():
    m = MarketModel(r=0.03, mu=CF.constant(0.03), sigma=CF.constant(0.2), M0=0.0)
    s = UtilitySpec.log(0.5, 0.1, h=1.0)
    lo, hi = log_A_bounds(m, s, 0.0)
    assert hi - lo == pytest.approx(0.0, abs=1e-12)
    assert log_fixed_point_constant(m, s) == pytest.approx(lo, rel=1e-10)


def test_power_fixed_point_quadrature_recursion(const_model, power_spec):
    a, lam = power_fixed_point_quadrature(const_model, power_spec)
    assert a == pytest.approx(11.894424, abs=1e-5)
    cfg = cfg_for([0.0], inner="quadrature", tol=1e-10)
    res = iterate_to_fixed_point(const_model, power_spec, cfg)
    assert res.converged and res.A_star.values[0] == pytest.approx(a, abs=1e-6)
    assert check_bounds_power(res, const_model, power_spec).passed
    lo, hi = power_A_bounds(const_model, power_spec, 0.16)
    assert lo == pytest.approx(8.0676, abs=1e-4) and hi == pytest.approx(14.9892, abs=1e-4)
    assert not check_bounds_power(GridFunction.constant(10 * a), const_model, power_spec, M0=0.16).passed


def test_power_bounds_gamma_one(const_model):
    s = UtilitySpec.power(0.5, 1.0, 0.1, h=1.0)
    lo, hi = power_A_bounds(const_model, s, 0.16)
    den = 1 - math.exp(-0.1)
    assert lo == pytest.approx(math.exp(0.01 - 0.1) / den)
    zeta_a = 0.02 * 0.5 + 0.5 * 0.16 / (2 * 0.5)
    assert hi == pytest.approx(math.exp(zeta_a - 0.1) / den)


def test_power_bounds_negative_alpha(const_model):
    s = UtilitySpec.power(-1.0, 0.5, 0.1, h=0.8)
    lo, hi = power_A_bounds(const_model, s, 0.16)
    assert 0 < lo < hi
    a, _ = power_fixed_point_quadrature(const_model, s)
    assert lo <= a <= hi


def test_contraction_factor(const_model, power_spec, log_spec):
    assert contraction_factor(const_model, power_spec, 0.16) == pytest.approx(0.933949, abs=1e-6)
    assert contraction_factor(const_model, log_spec, 0.16) == pytest.approx(math.exp(-0.1))


def test_measured_contraction(ou_model, power_spec):
    cfg = cfg_for(np.linspace(-1, 1, 3), seed=11)
    q = contraction_factor(ou_model, power_spec, ou_model.M0)
    ratio, se = measure_contraction(GridFunction.constant(8.0), GridFunction.constant(14.0), ou_model, power_spec, cfg)
    assert ratio <= q + 3 * se


def test_power_mc_fixed_point_ou(ou_model, power_spec):
    cfg = cfg_for(np.linspace(-1, 1, 3), n_paths=4096, seed=13, tol=1e-2)
    res = iterate_to_fixed_point(ou_model, power_spec, cfg)
    assert res.converged
    assert check_bounds_power(res, ou_model, power_spec).passed


def test_value_function_cases(const_model, power_spec, log_spec):
    A = GridFunction(np.array([-1.0, 1.0]), np.array([10.0, 12.0]))
    assert value_function(A, power_spec, 1.0, 0.0) == pytest.approx(22.0)
    assert value_function(A, log_spec, 1.0, 1.0) == pytest.approx(12.0)
    s1 = UtilitySpec.log(1.0, 0.1)
    assert value_function(A, s1, 7.0, -1.0) == pytest.approx(10.0)
    with pytest.raises(DomainError):
        value_function(A, power_spec, 0.0, 0.0)


def test_value_bounds_scaling(const_model, power_spec):
    lo1, hi1 = value_bounds(const_model, power_spec, 1.0, 0.16)
    lo3, hi3 = value_bounds(const_model, power_spec, 3.0, 0.16)
    f = 3.0 ** 0.25
    assert lo3 / lo1 == pytest.approx(f, rel=1e-14) and hi3 / hi1 == pytest.approx(f, rel=1e-14)
    V = value_function(GridFunction.constant(11.894424), power_spec, 3.0, 0.0)
    assert value_bounds_check(const_model, power_spec, 3.0, 0.0, V, M0=0.16).passed
    assert not value_bounds_check(const_model, power_spec, 3.0, 0.0, 10 * V, M0=0.16).passed
