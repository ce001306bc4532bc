"""One-period primal and dual problems.

For a continuation function ``A`` and a starting factor value ``y0`` the
one-period problem is ``sup_X E[h_A(X_tau, Y_tau)]`` over terminal wealths
financed from unit capital.  Its dual is

    inf_{lambda > 0} { inf_eta E[Phi(lambda Z^eta_tau / B_tau, Y_tau)] + lambda },

where ``Phi`` is the convex conjugate of ``h_A`` and ``eta`` tilts the
non-traded Brownian direction.  The dual value bounds the primal from above
and the two agree at the optimum; the solver reports both sides and the gap.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import NumericalFailure, UsageError
from .knots import TensorStencil, bilinear, local_knots, time_knots
from .market import MarketModel, theta
from .mc import Estimate, combined_se, estimate
from .sde import FeedbackPolicy, PathBundle, SimulationConfig, simulate_factor, simulate_wealth
from .utility import GridFunction, UtilitySpec, as_grid_function, bind, sandwich_constants

BUDGET_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class DualControl:
    """Feedback control ``eta(t, y)`` tabulated on (time x factor) knots.

    Bilinear interpolation with clamped extrapolation; values are confined to
    ``|eta| <= eta_max``.  A single knot with value 0 is the exact zero control.
    """

    times: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    eta_max: float = 5.0

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        y = np.atleast_1d(np.asarray(self.ys, dtype=float))
        v = np.asarray(self.values, dtype=float).reshape(t.size, y.size)
        if not np.all(np.isfinite(v)):
            raise UsageError("control values must be finite")
        v = np.clip(v, -self.eta_max, self.eta_max)
        for name, a in (("times", t), ("ys", y), ("values", v)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def zero(cls, eta_max: float = 5.0) -> "DualControl":
        return cls(np.array([0.0]), np.array([0.0]), np.zeros((1, 1)), eta_max)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def __call__(self, t: float, y):
        if self.is_zero:
            return np.zeros(np.shape(y))
        return bilinear(self.times, self.ys, self.values, t, y)

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "ys": self.ys.tolist(), "values": self.values.tolist(),
                "eta_max": self.eta_max}


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings of the one-period solver.

    ``method`` selects the outer search: ``"lbfgs"`` (box-constrained
    quasi-Newton on the common-random-number sample objective with its
    path-wise gradient) or ``"coordinate"`` (derivative-free coordinate
    descent with shrinking steps).
    """

    sim: SimulationConfig = field(default_factory=SimulationConfig)
    eta_time_knots: int = 4
    eta_factor_knots: int = 9
    eta_max: float = 5.0
    pi_time_knots: int = 4
    pi_factor_knots: int = 9
    pi_max: float = 20.0
    knot_width: float = 3.0
    method: str = "lbfgs"
    max_iter: int = 200
    coord_step: float = 0.5
    coord_min_step: float = 1e-3
    noise_frac: float = 1e-3
    gap_rel_tol: float = 1e-2
    with_primal: bool = True
    force_search: bool = False

    def __post_init__(self):
        if self.method not in ("lbfgs", "coordinate"):
            raise UsageError("method must be 'lbfgs' or 'coordinate'")
        if self.eta_max <= 0 or self.pi_max <= 0:
            raise UsageError("box bounds must be positive")

    def refined(self) -> "SolverConfig":
        """Same settings with roughly doubled knot counts."""
        import dataclasses
        return dataclasses.replace(
            self, eta_time_knots=2 * self.eta_time_knots - 1, eta_factor_knots=2 * self.eta_factor_knots - 1,
            pi_time_knots=2 * self.pi_time_knots - 1, pi_factor_knots=2 * self.pi_factor_knots - 1)


@dataclass(frozen=True)
class GapReport:
    gap: float
    se: float
    tolerance: float
    passed: bool
    weak_duality_ok: bool

    def to_dict(self) -> dict:
        return {"gap": self.gap, "se": self.se, "tolerance": self.tolerance, "passed": self.passed,
                "weak_duality_ok": self.weak_duality_ok}


@dataclass(frozen=True, eq=False)
class OnePeriodSolution:
    """Dual optimum ``(lambda*, eta*)`` with its primal certificate.

    ``dual_value`` is the bound ``E[Phi(lambda* Z/B, Y)] + lambda* x0`` and is
    directly comparable with ``primal_value``; ``conjugate_mean`` is the
    first term alone.
    """

    y0: float
    lambda_star: float
    eta_star: DualControl
    dual_value: Estimate
    conjugate_mean: Estimate
    budget_residual: float
    budget_se: float
    primal_value: Optional[Estimate] = None
    policy: Optional[FeedbackPolicy] = None
    gap: Optional[GapReport] = None
    zero_control_value: Optional[Estimate] = None
    boundary_hit: bool = False
    method: str = ""
    n_evals: int = 0

    @property
    def budget_ok(self) -> bool:
        return abs(self.budget_residual) <= max(BUDGET_TOL, 3.0 * self.budget_se)

    def to_dict(self) -> dict:
        return {
            "y0": self.y0,
            "lambda_star": self.lambda_star,
            "eta_star": self.eta_star.to_dict(),
            "dual_value": self.dual_value.to_dict(),
            "conjugate_mean": self.conjugate_mean.to_dict(),
            "primal_value": None if self.primal_value is None else self.primal_value.to_dict(),
            "gap": None if self.gap is None else self.gap.to_dict(),
            "budget_residual": self.budget_residual,
            "budget_se": self.budget_se,
            "boundary_hit": self.boundary_hit,
            "method": self.method,
            "n_evals": self.n_evals,
        }


# ---------------------------------------------------------------------------
# per-bundle precomputation
# ---------------------------------------------------------------------------

class _Period:
    """Quantities of one simulated period shared by every candidate control."""

    def __init__(self, model: MarketModel, spec: UtilitySpec, A, bundle: PathBundle):
        self.model, self.spec, self.bundle = model, spec, bundle
        self.A = as_grid_function(A)
        self.dt = bundle.dt
        self.YT = bundle.Y[-1]
        th = theta(model, bundle.Y[:-1])
        self.theta = th
        self.log_z0 = np.sum(-th * bundle.dW1 - 0.5 * th * th * self.dt, axis=0)
        self.log_w0 = self.log_z0 - model.r * bundle.tau
        self.kernel = bind(spec, spec.h(self.YT), self.A(self.YT))
        self._stencils = {}

    def stencil(self, times, ys) -> TensorStencil:
        key = (tuple(times), tuple(ys))
        if key not in self._stencils:
            self._stencils[key] = TensorStencil(times, ys, self.bundle.t[:-1], self.bundle.Y[:-1])
        return self._stencils[key]

    def eta_log_part(self, eta_paths) -> np.ndarray:
        return np.sum(eta_paths * self.bundle.dW2 - 0.5 * eta_paths * eta_paths * self.dt, axis=0)

    def log_w(self, eta) -> np.ndarray:
        """``log(Z^eta_tau / B_tau)`` per path."""
        if eta is None or (isinstance(eta, DualControl) and eta.is_zero):
            return self.log_w0
        if isinstance(eta, DualControl):
            paths = self.stencil(eta.times, eta.ys).evaluate(eta.values)
        else:
            b = self.bundle
            paths = np.stack([np.asarray(eta(b.t[k], b.Y[k]), dtype=float) * np.ones(b.n_paths)
                              for k in range(b.n_steps)])
        return self.log_w0 + self.eta_log_part(paths)


def _budget_lambda(kernel, log_w: np.ndarray, x0: float = 1.0, lam0: Optional[float] = None,
                   tol: float = BUDGET_TOL) -> float:
    """Solve ``mean(x*(lambda w) w) = x0`` for ``lambda`` (bracketed root in ``log lambda``)."""
    if kernel.kind == "log":
        return 1.0 / x0
    w = np.exp(log_w)
    lx0 = math.log(x0)

    def g(s):
        return math.log(np.mean(kernel.inverse(np.exp(s + log_w)) * w)) - lx0

    if lam0 is None:
        # single-term closed form as the starting point
        p1 = kernel.p1
        seed = np.mean((w / kernel.hv) ** (1.0 / p1) * w)
        s0 = p1 * (lx0 - math.log(seed))
    else:
        s0 = math.log(lam0)
    g0 = g(s0)
    if g0 == 0.0:
        return math.exp(s0)
    # g is decreasing in s; step towards the root with doubling steps
    step = 0.25 if lam0 is not None else 1.0
    direction = 1.0 if g0 > 0 else -1.0
    a, ga = s0, g0
    for _ in range(80):
        b = a + direction * step
        gb = g(b)
        if gb == 0.0:
            return math.exp(b)
        if (gb > 0) != (ga > 0):
            break
        a, ga = b, gb
        step *= 2.0
    else:
        raise NumericalFailure("could not bracket the budget multiplier")
    lo, hi = (a, b) if a < b else (b, a)
    s = optimize.brentq(g, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=300)
    lam = math.exp(s)
    res = np.mean(kernel.inverse(lam * w) * w) / x0 - 1.0
    if not abs(res) <= tol:
        raise NumericalFailure(f"budget residual {res:.3e} above tolerance {tol:g}")
    return lam


def _budget_stats(kernel, log_w, lam, x0, antithetic):
    w = np.exp(log_w)
    est = estimate(kernel.inverse(lam * w) * w / x0, antithetic)
    return est.mean - 1.0, est.se


def _bundle_for(model, y0, cfg_or_bundle, stream=0) -> PathBundle:
    if isinstance(cfg_or_bundle, PathBundle):
        return cfg_or_bundle
    return simulate_factor(model, y0, cfg_or_bundle, stream=stream)


# ---------------------------------------------------------------------------
# dual side
# ---------------------------------------------------------------------------

def dual_value(model: MarketModel, spec: UtilitySpec, A, y0: float, eta, lam: float,
               bundle: PathBundle) -> Estimate:
    """Monte Carlo ``E[Phi(lambda Z^eta_tau / B_tau, Y_tau)]`` with its standard error."""
    if not lam > 0:
        raise UsageError("lambda must be positive")
    per = _Period(model, spec, A, bundle)
    u = lam * np.exp(per.log_w(eta))
    return estimate(per.kernel.conjugate(u), bundle.antithetic)


def solve_lambda(model: MarketModel, spec: UtilitySpec, A, y0: float, eta, bundle: PathBundle,
                 x0: float = 1.0) -> float:
    """Budget-binding multiplier: ``|mean(x*(lambda Z/B) Z/B) / x0 - 1| <= 1e-8``.

    Log utility gives ``1 / x0`` exactly.
    """
    per = _Period(model, spec, A, bundle)
    return _budget_lambda(per.kernel, per.log_w(eta), x0)


def _factor_free(model: MarketModel, spec: UtilitySpec, A: GridFunction) -> bool:
    """Nothing in the one-period objective depends on the factor."""
    return model.price_coefficients_constant and spec.h.is_constant and A.is_constant


def _lbfgs_options(cfg: SolverConfig, noise: float, f0: float) -> dict:
    """Stop once an iteration improves the objective by less than ``cfg.noise_frac`` standard errors."""
    ftol = max(cfg.noise_frac * noise / max(abs(f0), 1.0), 1e-14)
    return {"maxiter": cfg.max_iter, "ftol": ftol, "gtol": 1e-12, "maxcor": 20}


def _dual_search_lbfgs(per: _Period, times, ys, x0, cfg: SolverConfig, c0=None, s0=None, noise=0.0):
    st = per.stencil(times, ys)
    nt, ny = st.shape
    kern = per.kernel
    dW2, dt, P = per.bundle.dW2, per.dt, per.bundle.n_paths
    n_eval = [0]

    def fun(p):
        n_eval[0] += 1
        c = p[:-1]
        s = p[-1]
        lam = math.exp(s)
        eta = st.evaluate(c)
        logu = s + per.log_w0 + per.eta_log_part(eta)
        u = np.exp(logu)
        phi, x = kern.conjugate_and_argmax(u)
        xu = x * u
        f = float(np.mean(phi)) + lam * x0
        gs = -float(np.mean(xu)) + lam * x0
        g = (-xu / P)[None, :] * (dW2 - eta * dt)
        gc = st.adjoint(g).ravel()
        return f, np.concatenate([gc, [gs]])

    if c0 is None:
        c0 = np.zeros(nt * ny)
    if s0 is None:
        s0 = math.log(_budget_lambda(kern, per.log_w0, x0))
    p0 = np.concatenate([np.ravel(c0), [s0]])
    bounds = [(-cfg.eta_max, cfg.eta_max)] * (nt * ny) + [(None, None)]
    res = optimize.minimize(fun, p0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options=_lbfgs_options(cfg, noise, fun(p0)[0]))
    return res.x[:-1].reshape(nt, ny), n_eval[0]


def _coordinate_descent(f, x0, lo, hi, step, min_step, noise=0.0, max_evals=20000):
    """Minimize ``f`` by coordinate moves of size ``step``, halving it when a sweep stalls.

    A sweep whose total improvement is below ``max(1e-4, noise)`` also halves
    the step; the search ends once the step falls below ``min_step``.
    """
    x = np.array(x0, dtype=float)
    fx = f(x)
    n_eval = 1
    while step >= min_step and n_eval < max_evals:
        gain = 0.0
        for i in range(x.size):
            for d in (1.0, -1.0):
                y = x.copy()
                y[i] = min(hi, max(lo, x[i] + d * step))
                if y[i] == x[i]:
                    continue
                fy = f(y)
                n_eval += 1
                if fy < fx:
                    gain += fx - fy
                    x, fx = y, fy
                    break
        if gain < max(1e-4, noise):
            step *= 0.5
    return x, fx, n_eval


def _dual_search_coordinate(per: _Period, times, ys, x0, cfg: SolverConfig, c0=None):
    st = per.stencil(times, ys)
    nt, ny = st.shape
    kern = per.kernel
    lam_cache = {"lam": None}

    def J(c):
        lw = per.log_w0 + per.eta_log_part(st.evaluate(c))
        lam = _budget_lambda(kern, lw, x0, lam_cache["lam"])
        lam_cache["lam"] = lam
        return float(np.mean(kern.conjugate(lam * np.exp(lw)))) + lam * x0

    start = np.zeros(nt * ny) if c0 is None else np.ravel(c0)
    c, _, n = _coordinate_descent(J, start, -cfg.eta_max, cfg.eta_max, cfg.coord_step, cfg.coord_min_step)
    return c.reshape(nt, ny), n


def solve_dual(model: MarketModel, spec: UtilitySpec, A, y0: float, cfg: SolverConfig,
               bundle: Optional[PathBundle] = None, eta0: Optional[DualControl] = None,
               x0: float = 1.0) -> OnePeriodSolution:
    """Minimize the dual over (eta, lambda) on one bundle of common random numbers.

    The search starts from ``eta0`` (zero by default) and keeps the better of
    the optimized and the starting control.  Log utility and factor-free
    power problems return ``eta = 0`` without a search (the objective does not
    see the non-traded direction), unless ``cfg.force_search`` is set.
    With ``cfg.with_primal`` a feedback-policy search supplies the primal side
    and the gap report.
    """
    A = as_grid_function(A)
    bundle = bundle if bundle is not None else simulate_factor(model, y0, cfg.sim)
    per = _Period(model, spec, A, bundle)
    kern = per.kernel
    anti = bundle.antithetic

    lam_zero = _budget_lambda(kern, per.log_w0, x0)
    phi0 = kern.conjugate(lam_zero * np.exp(per.log_w0))
    zero_val = estimate(phi0, anti).shifted(lam_zero * x0)

    control = DualControl.zero(cfg.eta_max)
    n_evals = 0
    method = "closed-form" if spec.kind == "log" else "symmetry"
    search = spec.kind == "power" and (cfg.force_search or not _factor_free(model, spec, A))
    if search:
        times = time_knots(bundle.tau, cfg.eta_time_knots)
        ys = local_knots(y0, bundle.Y, cfg.eta_factor_knots, cfg.knot_width)
        c0 = None
        if eta0 is not None and not eta0.is_zero:
            c0 = np.array([[eta0(t, y) for y in ys] for t in times])
        if cfg.method == "lbfgs":
            c, n_evals = _dual_search_lbfgs(per, times, ys, x0, cfg, c0, noise=zero_val.se)
        else:
            c, n_evals = _dual_search_coordinate(per, times, ys, x0, cfg, c0)
        control = DualControl(times, ys, c, cfg.eta_max)
        method = cfg.method

    lw = per.log_w(control)
    lam = _budget_lambda(kern, lw, x0, lam_zero)
    phi = kern.conjugate(lam * np.exp(lw))
    conj = estimate(phi, anti)
    val = conj.shifted(lam * x0)
    if val.mean > zero_val.mean:
        control, lw, lam, conj, val = DualControl.zero(cfg.eta_max), per.log_w0, lam_zero, estimate(phi0, anti), zero_val
    boundary = bool(np.any(np.abs(control.values) >= cfg.eta_max * (1 - 1e-9)))
    if boundary:
        warnings.warn("dual control touches its box bound; consider a larger eta_max", RuntimeWarning,
                      stacklevel=2)
    res, res_se = _budget_stats(kern, lw, lam, x0, anti)

    primal = policy = gap = None
    if cfg.with_primal:
        policy, primal = solve_primal(model, spec, A, y0, cfg, bundle=bundle, x0=x0)
        gap = duality_gap(primal, val, cfg.gap_rel_tol)
    return OnePeriodSolution(y0=float(y0), lambda_star=lam, eta_star=control, dual_value=val,
                             conjugate_mean=conj, budget_residual=res, budget_se=res_se,
                             primal_value=primal, policy=policy, gap=gap, zero_control_value=zero_val,
                             boundary_hit=boundary, method=method, n_evals=n_evals)


# ---------------------------------------------------------------------------
# primal side
# ---------------------------------------------------------------------------

def _objective_samples(kernel, logX):
    if kernel.kind == "log":
        return logX
    return kernel.value(np.exp(logX))


def primal_value(model: MarketModel, spec: UtilitySpec, A, y0: float, policy, bundle: PathBundle,
                 x0: float = 1.0) -> Estimate:
    """Monte Carlo ``E[h_A(X_tau, Y_tau)]`` (``E[log X_tau]`` for log) under a feedback policy."""
    per = _Period(model, spec, A, bundle)
    b = simulate_wealth(model, policy, x0, bundle)
    return estimate(_objective_samples(per.kernel, b.logX[-1]), bundle.antithetic)


class _PrimalProblem:
    def __init__(self, per: _Period, x0: float):
        self.per = per
        b = per.bundle
        Yk = b.Y[:-1]
        m = per.model
        self.ex = m.mu(Yk) - m.r
        self.sig = m.sigma(Yk)
        self.sig2 = self.sig * self.sig
        self.base = math.log(x0) + m.r * b.tau
        self.dW1 = b.dW1
        self.dt = b.dt
        self.sdW = self.sig * self.dW1

    def log_wealth(self, pi):
        return self.base + np.sum(pi * (self.ex * self.dt + self.sdW) - 0.5 * pi * pi * self.sig2 * self.dt, axis=0)


def _seed_policy_values(model, spec, times, ys):
    th = theta(model, ys) / model.sigma(ys)
    if spec.kind == "power":
        th = th / (1.0 - spec.alpha)
    return np.tile(th, (len(times), 1))


def solve_primal(model: MarketModel, spec: UtilitySpec, A, y0: float, cfg: SolverConfig,
                 bundle: Optional[PathBundle] = None, policy0=None, x0: float = 1.0,
                 method: Optional[str] = None):
    """Search over tabulated feedback policies ``pi(t, y)`` for the best primal value.

    Starts at the Merton-type seed (``theta/((1-alpha) sigma)`` for power,
    ``theta/sigma`` for log) unless ``policy0`` gives knot values (array) or
    a policy to sample.  Returns ``(policy, value estimate)``.
    """
    A = as_grid_function(A)
    bundle = bundle if bundle is not None else simulate_factor(model, y0, cfg.sim)
    per = _Period(model, spec, A, bundle)
    pp = _PrimalProblem(per, x0)
    kern = per.kernel
    times = time_knots(bundle.tau, cfg.pi_time_knots)
    ys = local_knots(y0, bundle.Y, cfg.pi_factor_knots, cfg.knot_width)
    st = per.stencil(times, ys)
    if policy0 is None:
        c0 = _seed_policy_values(model, spec, times, ys)
    elif isinstance(policy0, np.ndarray):
        c0 = policy0.reshape(st.shape)
    else:
        c0 = np.array([[float(np.asarray(policy0(t, np.array([y]), model))[0]) for y in ys] for t in times])
    c0 = np.clip(c0, -cfg.pi_max, cfg.pi_max)
    P = bundle.n_paths
    method = method or cfg.method

    if method == "lbfgs":
        def fun(c):
            pi = st.evaluate(c)
            lx = pp.log_wealth(pi)
            if kern.kind == "log":
                f = -float(np.mean(lx))
                wgt = np.full(P, -1.0 / P)
            else:
                X = np.exp(lx)
                f = -float(np.mean(kern.value(X)))
                wgt = -kern.marginal(X) * X / P
            g = wgt[None, :] * (pp.ex * pp.dt + pp.sdW - pi * pp.sig2 * pp.dt)
            return f, st.adjoint(g).ravel()

        bounds = [(-cfg.pi_max, cfg.pi_max)] * c0.size
        f0 = fun(c0.ravel())[0]
        noise = estimate(_objective_samples(kern, pp.log_wealth(st.evaluate(c0))), bundle.antithetic).se
        res = optimize.minimize(fun, c0.ravel(), jac=True, method="L-BFGS-B", bounds=bounds,
                                options=_lbfgs_options(cfg, noise, f0))
        c = res.x
    else:
        def J(c):
            return -float(np.mean(_objective_samples(kern, pp.log_wealth(st.evaluate(c)))))

        c, _, _ = _coordinate_descent(J, c0.ravel(), -cfg.pi_max, cfg.pi_max, cfg.coord_step, cfg.coord_min_step)
    c = c.reshape(st.shape)
    samples = _objective_samples(kern, pp.log_wealth(st.evaluate(c)))
    seed_samples = _objective_samples(kern, pp.log_wealth(st.evaluate(c0)))
    if np.mean(seed_samples) > np.mean(samples):
        c, samples = c0, seed_samples
    policy = FeedbackPolicy.table(times, ys, c, pi_max=cfg.pi_max)
    return policy, estimate(samples, bundle.antithetic)


def duality_gap(primal: Estimate, dual: Estimate, rel_tol: float = 1e-2) -> GapReport:
    """``gap = dual - primal``; passes when ``gap <= max(rel_tol |dual|, 3 combined SE)``."""
    se = combined_se(primal.se, dual.se)
    gap = dual.mean - primal.mean
    tol = max(rel_tol * abs(dual.mean), 3.0 * se)
    return GapReport(gap=gap, se=se, tolerance=tol, passed=gap <= tol, weak_duality_ok=gap >= -3.0 * se - 1e-12)


# ---------------------------------------------------------------------------
# oracles and closed forms
# ---------------------------------------------------------------------------

def _require_constant(model: MarketModel, spec: UtilitySpec):
    if not (model.price_coefficients_constant and spec.h.is_constant):
        raise UsageError("quadrature oracle needs constant mu, sigma and h")


def _gauss_hermite(n):
    x, w = np.polynomial.hermite.hermgauss(n)
    return x * math.sqrt(2.0), w / math.sqrt(math.pi)


def _log_w_nodes(model: MarketModel, tau: float, n_nodes: int):
    th = float(theta(model, 0.0))
    x, w = _gauss_hermite(n_nodes)
    sd = abs(th) * math.sqrt(tau)
    if sd == 0.0:
        return np.array([-model.r * tau]), np.array([1.0])
    return -0.5 * th * th * tau + sd * x - model.r * tau, w


def quadrature_oracle_constant(model: MarketModel, spec: UtilitySpec, A_const: float, lam: float,
                               n_nodes: int = 96) -> float:
    """Gauss-Hermite value of ``E[Phi(lambda e^{-r tau} Z^0_tau)]`` for constant coefficients.

    ``log Z^0_tau`` is Gaussian with mean ``-theta^2 tau / 2`` and variance ``theta^2 tau``.
    """
    _require_constant(model, spec)
    if n_nodes < 64:
        raise UsageError("use at least 64 quadrature nodes")
    kern = bind(spec, spec.h.values[0], float(A_const))
    lw, w = _log_w_nodes(model, spec.tau, n_nodes)
    return float(np.sum(w * kern.conjugate(lam * np.exp(lw))))


def quadrature_one_period(model: MarketModel, spec: UtilitySpec, A_const: float, x0: float = 1.0,
                          n_nodes: int = 96):
    """Quadrature one-period optimum for constant coefficients.

    Returns ``(value, lambda*)`` with ``value = E[Phi(lambda* w)] + lambda* x0``
    at the budget-binding ``lambda*``.
    """
    _require_constant(model, spec)
    kern = bind(spec, spec.h.values[0], float(A_const))
    lw, w = _log_w_nodes(model, spec.tau, n_nodes)
    if kern.kind == "log":
        lam = 1.0 / x0
    else:
        ew = np.exp(lw)

        def g(s):
            return math.log(np.sum(w * kern.inverse(math.exp(s) * ew) * ew)) - math.log(x0)

        a, b = -1.0, 1.0
        while g(a) < 0:
            a -= 2.0 * (b - a)
        while g(b) > 0:
            b += 2.0 * (b - a)
        lam = math.exp(optimize.brentq(g, a, b, xtol=1e-15, rtol=1e-15, maxiter=300))
    val = float(np.sum(w * kern.conjugate(lam * np.exp(lw)))) + lam * x0
    return val, lam


def log_one_period_value(model: MarketModel, x0: float, y0: float, bundle: PathBundle) -> Estimate:
    """``log x0 + r tau + (1/2) E int_0^tau theta(Y_s)^2 ds`` (left-point sums on the factor paths)."""
    if not x0 > 0:
        raise UsageError("x0 must be positive")
    th = theta(model, bundle.Y[:-1])
    integ = 0.5 * np.sum(th * th, axis=0) * bundle.dt
    return estimate(integ, bundle.antithetic).shifted(math.log(x0) + model.r * bundle.tau)


def _exp_W1(model, bundle, integrand):
    """Log of the Doleans-Dade exponential of ``integrand(t, Y)`` against W1 at the horizon."""
    if integrand is None:
        return np.zeros(bundle.n_paths)
    vals = np.stack([np.asarray(integrand(bundle.t[k], bundle.Y[k]), dtype=float) * np.ones(bundle.n_paths)
                     for k in range(bundle.n_steps)])
    return np.sum(vals * bundle.dW1 - 0.5 * vals * vals * bundle.dt, axis=0)


def artificial_dual_value(model: MarketModel, spec: UtilitySpec, A, y0: float, nu, z: float, lam: float,
                          bundle: PathBundle) -> Estimate:
    """Artificial-market dual integrand for ``alpha < 0``.

    Monte Carlo mean of ``-h_A(z B_tau E^{W1}(nu)_tau / (lambda E^{W1}(-theta)_tau), Y_tau)``.
    """
    if spec.kind != "power" or not spec.alpha < 0:
        raise UsageError("the artificial dual is defined for power utility with alpha < 0")
    per = _Period(model, spec, A, bundle)
    log_e_theta = per.log_z0
    log_e_nu = _exp_W1(model, bundle, nu)
    arg = np.exp(math.log(z / lam) + model.r * bundle.tau + log_e_nu - log_e_theta)
    return estimate(-per.kernel.value(arg), bundle.antithetic)


def artificial_dual_upper_bound(model: MarketModel, spec: UtilitySpec, A, z: float, lam: float,
                                bundle: PathBundle) -> Estimate:
    """``-kappa (1 + (z B_tau / lambda)^rho E[exp(rho int theta dW1 + rho int theta^2 dt)])`` at ``nu = 0``."""
    kappa, rho = sandwich_constants(A, spec)
    th = theta(model, bundle.Y[:-1])
    expo = rho * np.sum(th * bundle.dW1 + th * th * bundle.dt, axis=0)
    scale = (z * math.exp(model.r * bundle.tau) / lam) ** rho
    return estimate(-kappa * (1.0 + scale * np.exp(expo)), bundle.antithetic)


def fixed_control_bound(kernel, log_w: np.ndarray, x0: float = 1.0, lam0: Optional[float] = None,
                        antithetic: bool = False):
    """Dual bound ``E[Phi(lambda w)] + lambda x0`` at the budget-binding ``lambda`` for fixed ``w = Z/B``.

    Returns ``(estimate, lambda)``.
    """
    lam = _budget_lambda(kernel, log_w, x0, lam0)
    return estimate(kernel.conjugate(lam * np.exp(log_w)), antithetic).shifted(lam * x0), lam


def period_log_density(model: MarketModel, spec: UtilitySpec, eta, bundle: PathBundle) -> np.ndarray:
    """``log(Z^eta_tau / B_tau)`` per path for a control on a bundle."""
    return _Period(model, spec, 0.0, bundle).log_w(eta)
