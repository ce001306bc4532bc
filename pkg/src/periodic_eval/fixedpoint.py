"""Contraction operator Psi on the factor grid, Picard iteration to A*, and value bounds.

Power utility::

    Psi(A; y) = alpha e^{-delta tau} sup_X E[h_A(X_tau, Y_tau)]

evaluated through the one-period dual.  Log utility::

    Psi(A; y) = c1 sup E[log X_tau] + e^{-delta tau} E[h(Y_tau) + A(Y_tau)],
    c1 = (1 - gamma e^{-delta tau}) / (e^{delta tau} - 1).
"""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DomainError, UsageError
from .market import MarketModel, effective_M0, theta, zeta
from .mc import estimate
from .oneperiod import (
    OnePeriodSolution,
    SolverConfig,
    fixed_control_bound,
    period_log_density,
    quadrature_one_period,
    solve_dual,
)
from .sde import simulate_factor
from .utility import GridFunction, UtilitySpec, as_grid_function, bind

WORKERS_ENV = "PERIODIC_EVAL_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class FixedPointConfig:
    """Settings of the Picard iteration.

    inner : ``"mc"`` (dual Monte Carlo at every grid point) or ``"quadrature"``
        (scalar Gauss-Hermite recursion; constant coefficients and constant A only).
    refresh_rel : re-optimize the dual controls once A has moved by more than
        this fraction of ``sup |A|`` since the last optimization; in between,
        only the budget multipliers are re-solved.
    reseed_each_iteration : draw fresh paths every iteration instead of
        reusing one common-random-number family.
    """

    y_grid: np.ndarray
    tol: float = 1e-4
    max_iter: int = 1000
    solver: SolverConfig = field(default_factory=SolverConfig)
    inner: str = "mc"
    refresh_rel: float = 1e-2
    reseed_each_iteration: bool = False
    certify: bool = True
    workers: int = 0

    def __post_init__(self):
        g = np.asarray(self.y_grid, dtype=float).ravel()
        if g.size == 0 or np.any(np.diff(g) <= 0):
            raise UsageError("factor grid must be nonempty and strictly increasing")
        if not self.tol > 0:
            raise UsageError("tol must be positive")
        if self.inner not in ("mc", "quadrature"):
            raise UsageError("inner must be 'mc' or 'quadrature'")
        object.__setattr__(self, "y_grid", g)

    @property
    def n_workers(self) -> int:
        return self.workers if self.workers > 0 else default_workers()


@dataclass(frozen=True)
class BoundReport:
    passed: bool
    lower: float
    upper: float
    min_margin: float
    margins_lower: np.ndarray
    margins_upper: np.ndarray

    def to_dict(self) -> dict:
        return {"passed": self.passed, "lower": self.lower, "upper": self.upper, "min_margin": self.min_margin}


@dataclass(frozen=True, eq=False)
class PsiEvaluation:
    values: GridFunction
    se: np.ndarray
    solutions: Optional[List[OnePeriodSolution]] = None
    flagged: tuple = ()
    clamped: int = 0


@dataclass(frozen=True, eq=False)
class FixedPointResult:
    A_star: GridFunction
    A_se: np.ndarray
    A_se_fixed: np.ndarray
    iterations: int
    converged: bool
    certified: bool
    steps: tuple
    measured_contraction: tuple
    q_theory: float
    stop_threshold: float
    residual: Optional[float]
    residual_se: Optional[float]
    bound_check: Optional[BoundReport]
    kind: str
    C_star: Optional[float] = None
    solutions: Optional[List[OnePeriodSolution]] = None
    flagged: tuple = ()
    clamped: int = 0
    M0: float = float("nan")
    refreshes: int = 0


# ---------------------------------------------------------------------------
# closed-form constants and bounds
# ---------------------------------------------------------------------------

def C_star(gamma: float, delta: float, tau: float) -> float:
    """Coefficient of ``log x`` in the log value function: ``(1 - gamma) / (e^{delta tau} - 1)``."""
    if not delta * tau > 0:
        raise DomainError("need delta * tau > 0")
    return (1.0 - gamma) / math.expm1(delta * tau)


def log_psi_coefficient(spec: UtilitySpec) -> float:
    """``c1 = (1 - gamma e^{-delta tau}) / (e^{delta tau} - 1)``."""
    dt = spec.delta * spec.tau
    return (1.0 - spec.gamma * math.exp(-dt)) / math.expm1(dt)


def contraction_factor(model: MarketModel, spec: UtilitySpec, M0: float) -> float:
    if spec.kind == "log":
        return math.exp(-spec.delta * spec.tau)
    return math.exp(-(spec.delta - zeta(model.r, M0, spec.alpha * (1.0 - spec.gamma))) * spec.tau)


def power_A_bounds(model: MarketModel, spec: UtilitySpec, M0: float):
    """Interval containing the power fixed point ``A*``."""
    a, g, d, t, r, m = spec.alpha, spec.gamma, spec.delta, spec.tau, model.r, spec.m
    cash = math.exp((r * a - d) * t) / (1.0 - math.exp(-(d - r * a * (1.0 - g)) * t))
    growth = math.exp((zeta(r, M0, a) - d) * t) / (1.0 - math.exp(-(d - zeta(r, M0, a * (1.0 - g))) * t))
    if a > 0:
        return m * cash, growth
    return m * growth, cash


def log_A_bounds(model: MarketModel, spec: UtilitySpec, M0: float):
    """Interval containing the log fixed point ``A*``."""
    g, d, t, r, m = spec.gamma, spec.delta, spec.tau, model.r, spec.m
    e = math.exp(d * t)
    k = (e - g) / (e - 1.0) ** 2
    tail = math.exp(-d * t) / (1.0 - math.exp(-d * t))
    return k * r * t + m * tail, k * (r + M0 / 2.0) * t + tail


def lower_bound_start(model: MarketModel, spec: UtilitySpec, M0: float) -> float:
    return (log_A_bounds if spec.kind == "log" else power_A_bounds)(model, spec, M0)[0]


def _bound_report(A: GridFunction, lo: float, hi: float) -> BoundReport:
    ml = A.values - lo
    mu = hi - A.values
    ok = bool(np.all(ml >= 0) and np.all(mu >= 0))
    return BoundReport(ok, lo, hi, float(min(ml.min(), mu.min())), ml, mu)


def _A_of(result_or_A) -> GridFunction:
    return result_or_A.A_star if isinstance(result_or_A, FixedPointResult) else as_grid_function(result_or_A)


def check_bounds_power(result_or_A, model: MarketModel, spec: UtilitySpec, M0: Optional[float] = None) -> BoundReport:
    """Every grid value of ``A*`` inside the power interval (sign-flipped pair for ``alpha < 0``)."""
    A = _A_of(result_or_A)
    M0 = _M0(model, A, M0, result_or_A)
    return _bound_report(A, *power_A_bounds(model, spec, M0))


def check_bounds_log(result_or_A, model: MarketModel, spec: UtilitySpec, M0: Optional[float] = None) -> BoundReport:
    A = _A_of(result_or_A)
    M0 = _M0(model, A, M0, result_or_A)
    return _bound_report(A, *log_A_bounds(model, spec, M0))


def _M0(model, A, M0, result_or_A):
    if M0 is not None:
        return M0
    if isinstance(result_or_A, FixedPointResult) and math.isfinite(result_or_A.M0):
        return result_or_A.M0
    return effective_M0(model, A.y)


def value_function(result_or_A, spec: UtilitySpec, x, y):
    """``(1/alpha) A*(y) x^{alpha(1-gamma)}`` (power) or ``A*(y) + C* log x`` (log)."""
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0)):
        raise DomainError("wealth must be positive")
    A = _A_of(result_or_A)
    if spec.kind == "log":
        out = A(y) + C_star(spec.gamma, spec.delta, spec.tau) * np.log(xa)
    else:
        out = A(y) * xa ** (spec.alpha * (1.0 - spec.gamma)) / spec.alpha
    return float(out) if np.ndim(out) == 0 else out


def value_bounds(model: MarketModel, spec: UtilitySpec, x, M0: float):
    """Two-sided bounds on the value function at wealth ``x``."""
    xa = np.asarray(x, dtype=float)
    d, t, r, g, m = spec.delta, spec.tau, model.r, spec.gamma, spec.m
    if spec.kind == "log":
        e = math.exp(d * t)
        cs = C_star(g, d, t) * np.log(xa)
        k = t * (e - g) / (e - 1.0) ** 2
        return cs + m / (e - 1.0) + r * k, cs + 1.0 / (e - 1.0) + (r + M0 / 2.0) * k
    a = spec.alpha
    pos = a > 0
    scale = xa ** (a * (1.0 - g))
    lo = (m if pos else 1.0) * math.exp((r * a - d) * t) / (a * (1.0 - math.exp(-(d - r * a * (1.0 - g)) * t)))
    hi = (1.0 if pos else m) * math.exp((zeta(r, M0, a) - d) * t) / (
        a * (1.0 - math.exp((zeta(r, M0, a * (1.0 - g)) - d) * t)))
    return lo * scale, hi * scale


@dataclass(frozen=True)
class ValueBoundReport:
    passed: bool
    lower: float
    upper: float
    value: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def value_bounds_check(model: MarketModel, spec: UtilitySpec, x: float, y: float, V: float,
                       M0: float, slack: float = 0.0) -> ValueBoundReport:
    """``V`` inside the value bounds at ``x`` (``y`` enters only through ``V``)."""
    lo, hi = value_bounds(model, spec, x, M0)
    lo, hi = float(lo), float(hi)
    return ValueBoundReport(bool(lo - slack <= V <= hi + slack), lo, hi, float(V))


# ---------------------------------------------------------------------------
# Psi operators
# ---------------------------------------------------------------------------

def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _sim_cfg(cfg: FixedPointConfig, iteration: int):
    sim = cfg.solver.sim
    if cfg.reseed_each_iteration and iteration:
        sim = dataclasses.replace(sim, seed=sim.seed + iteration)
    return sim


def apply_Psi_log(A, model: MarketModel, spec: UtilitySpec, cfg: FixedPointConfig, iteration: int = 0,
                  cache: Optional[dict] = None) -> PsiEvaluation:
    """Log functional on the grid from factor paths started at each grid point.

    ``cache`` (a dict) keeps the per-path optimal log growth and terminal
    factor values between calls that use the same paths.
    """
    if spec.kind != "log":
        raise UsageError("apply_Psi_log needs log utility")
    A = as_grid_function(A)
    c1 = log_psi_coefficient(spec)
    disc = math.exp(-spec.delta * spec.tau)
    sim = _sim_cfg(cfg, iteration)

    def point(y0):
        key = (float(y0), sim)
        if cache is not None and key in cache:
            sup_log, yt, hT = cache[key]
        else:
            b = simulate_factor(model, y0, sim)
            th = theta(model, b.Y[:-1])
            sup_log = model.r * b.tau + 0.5 * np.sum(th * th, axis=0) * b.dt
            yt = b.Y[-1]
            hT = spec.h(yt)
            if cache is not None:
                cache[key] = (sup_log, yt, hT)
        est = estimate(c1 * sup_log + disc * (hT + A(yt)), sim.antithetic)
        return est.mean, est.se

    out = _map(point, cfg.y_grid, cfg.n_workers)
    vals = np.array([o[0] for o in out])
    return PsiEvaluation(GridFunction(cfg.y_grid, vals), np.array([o[1] for o in out]))


class _PowerState:
    """Per-grid-point dual control, density and multiplier carried across iterations."""

    __slots__ = ("eta", "log_w", "YT", "hT", "lam", "antithetic", "solution")

    def __init__(self, eta, log_w, YT, hT, lam, antithetic, solution=None):
        self.eta, self.log_w, self.YT, self.hT, self.lam = eta, log_w, YT, hT, lam
        self.antithetic, self.solution = antithetic, solution


def _factor_free(model, spec, A):
    return model.price_coefficients_constant and spec.h.is_constant and A.is_constant


def apply_Psi_power(A, model: MarketModel, spec: UtilitySpec, cfg: FixedPointConfig, states=None,
                    refresh: bool = True, with_primal: bool = False, iteration: int = 0) -> PsiEvaluation:
    """Power functional ``alpha e^{-delta tau} (dual bound)`` at each grid point.

    With ``refresh`` the dual controls are re-optimized (warm-started from
    ``states``); otherwise the stored controls are kept and only the budget
    multipliers are re-solved.  ``states`` (a list, one entry per grid point)
    is updated in place when given.  Entries whose duality gap fails its
    tolerance are listed in ``flagged``; negative values from noise are
    clamped to 0 and counted.
    """
    if spec.kind != "power":
        raise UsageError("apply_Psi_power needs power utility")
    A = as_grid_function(A)
    fac = spec.alpha * math.exp(-spec.delta * spec.tau)
    grid = cfg.y_grid
    if cfg.inner == "quadrature":
        if not A.is_constant:
            raise UsageError("quadrature inner mode needs a constant A")
        val, _ = quadrature_one_period(model, spec, A.values[0])
        return PsiEvaluation(GridFunction(grid, np.full(grid.size, fac * val)), np.zeros(grid.size))
    sim = _sim_cfg(cfg, iteration)
    scfg = dataclasses.replace(cfg.solver, sim=sim, with_primal=with_primal)
    if states is None:
        states = [None] * grid.size
    shortcut = _factor_free(model, spec, A) and not cfg.solver.force_search

    def full(i):
        y0 = grid[i]
        st = states[i]
        b = simulate_factor(model, y0, sim)
        sol = solve_dual(model, spec, A, y0, scfg, bundle=b, eta0=None if st is None else st.eta)
        lw = period_log_density(model, spec, sol.eta_star, b)
        states[i] = _PowerState(sol.eta_star, lw, b.Y[-1], spec.h(b.Y[-1]), sol.lambda_star, b.antithetic, sol)
        return sol.dual_value, sol

    def cheap(i):
        st = states[i]
        kern = bind(spec, st.hT, A(st.YT))
        est, lam = fixed_control_bound(kern, st.log_w, 1.0, st.lam, st.antithetic)
        st.lam = lam
        return est, None

    work = full if (refresh or any(s is None for s in states)) else cheap
    if shortcut:
        est, sol = work(0)
        for i in range(1, grid.size):
            states[i] = states[0]
        out = [(est, sol)] * grid.size
    else:
        out = _map(work, range(grid.size), cfg.n_workers)
    vals = np.array([fac * o[0].mean for o in out])
    ses = np.array([abs(fac) * o[0].se for o in out])
    sols = [o[1] for o in out] if out[0][1] is not None else None
    flagged = ()
    if with_primal and sols is not None:
        flagged = tuple(i for i, s in enumerate(sols) if s.gap is not None and not (s.gap.passed and s.gap.weak_duality_ok))
    neg = vals < 0
    clamped = int(neg.sum())
    vals = np.where(neg, 0.0, vals)
    return PsiEvaluation(GridFunction(grid, vals), ses, sols, flagged, clamped)


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------

def iterate_to_fixed_point(model: MarketModel, spec: UtilitySpec, cfg: FixedPointConfig,
                           A0=None) -> FixedPointResult:
    """Picard iteration ``A_{n+1} = Psi(A_n)`` until ``sup|A_{n+1} - A_n| <= tol (1 - q) / q``.

    ``A0`` defaults to the lower-bound constant.  For power utility the dual
    controls are re-optimized whenever A has moved by more than
    ``cfg.refresh_rel`` since their last optimization, and always in a final
    certification pass at the converged iterate, which also supplies the
    primal side, the duality gaps and the fixed-point residual.
    """
    grid = cfg.y_grid
    M0 = effective_M0(model, grid)
    q = contraction_factor(model, spec, M0)
    thr = cfg.tol * (1.0 - q) / q
    if A0 is None:
        A0 = GridFunction(grid, np.full(grid.size, lower_bound_start(model, spec, M0)))
    else:
        A0 = GridFunction(grid, as_grid_function(A0)(grid))
    A = A0
    steps: list = []
    states = [None] * grid.size
    log_cache: dict = {}
    A_ref = None
    refreshes = 0
    clamped = 0
    converged = False
    se = np.zeros(grid.size)
    n = 0
    for n in range(1, cfg.max_iter + 1):
        if spec.kind == "log":
            ev = apply_Psi_log(A, model, spec, cfg, iteration=n - 1, cache=log_cache)
        else:
            refresh = A_ref is None or cfg.reseed_each_iteration or (
                A.distance(A_ref) > cfg.refresh_rel * max(A.sup, 1e-12))
            if refresh:
                A_ref = A
                refreshes += 1
            ev = apply_Psi_power(A, model, spec, cfg, states, refresh=refresh, iteration=n - 1)
        clamped += ev.clamped
        step = ev.values.distance(A)
        steps.append(step)
        A, se = ev.values, ev.se
        if step <= thr:
            converged = True
            break
    ratios = tuple(steps[i] / steps[i - 1] if steps[i - 1] > 0 else 0.0 for i in range(1, len(steps)))
    # operator noise propagated through (I - DPsi)^{-1}, using the measured slope
    slope = min(ratios[-1], q) if ratios else q
    se_fixed = se / (1.0 - slope)

    residual = residual_se = None
    solutions = None
    flagged = ()
    certified = converged
    if spec.kind == "power" and cfg.certify and cfg.inner == "mc":
        ev = apply_Psi_power(A, model, spec, cfg, states, refresh=True, with_primal=True, iteration=n)
        residual = ev.values.distance(A)
        residual_se = float(ev.se.max())
        solutions = ev.solutions
        flagged = ev.flagged
        certified = converged and not flagged and all(s.budget_ok for s in solutions)
    elif spec.kind == "log" and cfg.certify:
        ev = apply_Psi_log(A, model, spec, cfg, iteration=n, cache=log_cache)
        residual = ev.values.distance(A)
        residual_se = float(ev.se.max())
    if spec.kind == "log":
        if residual is not None:
            se = ev.se
            se_fixed = se / (1.0 - slope)
        bounds = check_bounds_log(A, model, spec, M0)
        cs = C_star(spec.gamma, spec.delta, spec.tau)
    else:
        bounds = check_bounds_power(A, model, spec, M0)
        cs = None
    return FixedPointResult(A_star=A, A_se=se, A_se_fixed=se_fixed, iterations=n, converged=converged, certified=certified,
                            steps=tuple(steps), measured_contraction=ratios, q_theory=q, stop_threshold=thr,
                            residual=residual, residual_se=residual_se, bound_check=bounds, kind=spec.kind,
                            C_star=cs, solutions=solutions, flagged=flagged, clamped=clamped, M0=M0,
                            refreshes=refreshes)


def log_fixed_point_constant(model: MarketModel, spec: UtilitySpec) -> float:
    """Closed-form log fixed point for constant coefficients and constant ``h``:

    ``(c1 (r + theta^2 / 2) tau + e^{-delta tau} h) / (1 - e^{-delta tau})``.
    """
    if not (model.price_coefficients_constant and spec.h.is_constant):
        raise UsageError("closed form needs constant coefficients and constant h")
    th = float(theta(model, 0.0))
    c1 = log_psi_coefficient(spec)
    d = math.exp(-spec.delta * spec.tau)
    return (c1 * (model.r + 0.5 * th * th) * spec.tau + d * spec.h.values[0]) / (1.0 - d)


def power_fixed_point_quadrature(model: MarketModel, spec: UtilitySpec, tol: float = 1e-13,
                                 max_iter: int = 100000):
    """Scalar recursion ``a_{n+1} = alpha e^{-delta tau} V_quad(a_n)`` for constant coefficients.

    Returns ``(a*, lambda*)`` where ``lambda*`` is the budget multiplier at ``a*``.
    """
    fac = spec.alpha * math.exp(-spec.delta * spec.tau)
    M0 = float(theta(model, 0.0)) ** 2 if model.M0 is None else model.M0
    a = lower_bound_start(model, spec, M0)
    for _ in range(max_iter):
        v, lam = quadrature_one_period(model, spec, a)
        nxt = fac * v
        if abs(nxt - a) <= tol * max(1.0, abs(a)):
            return nxt, quadrature_one_period(model, spec, nxt)[1]
        a = nxt
    raise UsageError("scalar recursion did not converge")


def measure_contraction(A1, A2, model: MarketModel, spec: UtilitySpec, cfg: FixedPointConfig):
    """Measured ``d(Psi(A1), Psi(A2)) / d(A1, A2)`` with a paired standard error.

    Both operators are evaluated on the same paths at every grid point; the
    standard error is that of the path-wise difference at the grid point
    attaining the sup-norm.  Returns ``(ratio, se)``.
    """
    A1 = GridFunction(cfg.y_grid, as_grid_function(A1)(cfg.y_grid))
    A2 = GridFunction(cfg.y_grid, as_grid_function(A2)(cfg.y_grid))
    dist = A1.distance(A2)
    if dist == 0:
        raise UsageError("the two functions coincide")
    disc = math.exp(-spec.delta * spec.tau)
    sim = cfg.solver.sim
    scfg = dataclasses.replace(cfg.solver, with_primal=False)

    def point(y0):
        b = simulate_factor(model, y0, sim)
        if spec.kind == "log":
            yt = b.Y[-1]
            return estimate(disc * (A1(yt) - A2(yt)), b.antithetic)
        samples = []
        for A in (A1, A2):
            sol = solve_dual(model, spec, A, y0, scfg, bundle=b)
            lw = period_log_density(model, spec, sol.eta_star, b)
            kern = bind(spec, spec.h(b.Y[-1]), A(b.Y[-1]))
            samples.append(spec.alpha * disc * (kern.conjugate(sol.lambda_star * np.exp(lw)) + sol.lambda_star))
        return estimate(samples[0] - samples[1], b.antithetic)

    ests = _map(point, cfg.y_grid, cfg.n_workers)
    i = int(np.argmax([abs(e.mean) for e in ests]))
    return abs(ests[i].mean) / dist, ests[i].se / dist
