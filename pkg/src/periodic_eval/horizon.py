"""Multi-period assembly and verification.

Periods ``[T_{n-1}, T_n]`` with ``T_n = n tau`` are simulated one after the
other on independent random-number streams, each path continuing from its
own terminal factor value.  The concatenated dual optimum multiplies wealth
by ``x*_{h_{A*}}(lambda*_n Z-ratio / B-ratio, Y_{T_n})`` each period; the
running process

    D_n = sum_{i<=n} e^{-delta T_i} U(X_{T_i} / X_{T_{i-1}}^gamma, Y_{T_i}) + e^{-delta T_n} V-continuation

is a supermartingale for any admissible strategy and a martingale at the optimum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import DomainError, UsageError
from .fixedpoint import C_star, power_A_bounds
from .knots import TensorStencil
from .market import MarketModel, theta, zeta
from .mc import Estimate, estimate
from .oneperiod import DualControl, OnePeriodSolution
from .sde import FeedbackPolicy, SimulationConfig, simulate_factor, simulate_wealth
from .utility import UtilitySpec, as_grid_function, bind


@dataclass(frozen=True)
class HorizonPlan:
    """``n_periods`` evaluation periods; period ``n`` draws from stream ``stream_offset + n``."""

    n_periods: int
    sim: SimulationConfig
    stream_offset: int = 1000

    def __post_init__(self):
        if self.n_periods < 1:
            raise UsageError("need at least one period")

    @property
    def tau(self) -> float:
        return self.sim.tau

    @property
    def dates(self) -> np.ndarray:
        return np.arange(self.n_periods + 1) * self.tau

    def stream(self, n: int) -> int:
        return self.stream_offset + n


@dataclass(frozen=True, eq=False)
class WealthPath:
    """Wealth, factor and deflator ``Z/B`` at the evaluation dates, shape (N + 1, P)."""

    logX: np.ndarray
    Y: np.ndarray
    log_deflator: np.ndarray
    antithetic: bool
    tau: float
    n_clamped: int = 0

    @property
    def n_periods(self) -> int:
        return self.logX.shape[0] - 1


def log_optimal_policy(model: MarketModel, y):
    """``(mu(y) - r) / sigma(y)^2``."""
    s = model.sigma(y)
    if np.any(np.asarray(s) <= 0):
        raise DomainError("volatility must be strictly positive")
    out = (model.mu(y) - model.r) / (s * s)
    return out


# ---------------------------------------------------------------------------
# per-period solutions on the factor grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SolutionTable:
    """One-period dual solutions on the factor grid, interpolated at realized factor values."""

    y_grid: np.ndarray
    lambdas: np.ndarray
    controls: Optional[tuple] = None
    certified: bool = True

    @classmethod
    def constant(cls, lam: float, certified: bool = True) -> "SolutionTable":
        return cls(np.array([0.0]), np.array([float(lam)]), None, certified)

    @classmethod
    def from_solutions(cls, solutions: Sequence[OnePeriodSolution], certified: bool = True) -> "SolutionTable":
        grid = np.array([s.y0 for s in solutions])
        lams = np.array([s.lambda_star for s in solutions])
        return cls._build(grid, lams, [s.eta_star for s in solutions], certified)

    @classmethod
    def from_records(cls, records: Sequence[dict], certified: bool = True) -> "SolutionTable":
        """Rebuild from the ``to_dict`` records of one-period solutions."""
        grid = np.array([r["y0"] for r in records], dtype=float)
        lams = np.array([r["lambda_star"] for r in records], dtype=float)
        ctrls = [DualControl(np.asarray(r["eta_star"]["times"]), np.asarray(r["eta_star"]["ys"]),
                             np.asarray(r["eta_star"]["values"]), r["eta_star"]["eta_max"]) for r in records]
        return cls._build(grid, lams, ctrls, certified)

    @classmethod
    def _build(cls, grid, lams, ctrls, certified):
        if all(c.is_zero for c in ctrls):
            return cls(grid, lams, None, certified)
        shapes = {c.values.shape for c in ctrls if not c.is_zero}
        if len(shapes) != 1:
            raise UsageError("dual controls on the grid must share one knot layout")
        shape = shapes.pop()
        ref = next(c for c in ctrls if not c.is_zero)
        # zero controls are re-expressed on the common layout, centred at their own grid point
        ctrls = tuple(c if not c.is_zero else DualControl(ref.times, ref.ys - ref.ys.mean() + y,
                                                            np.zeros(shape), ref.eta_max)
                      for c, y in zip(ctrls, grid))
        return cls(grid, lams, ctrls, certified)

    def lam_at(self, y) -> np.ndarray:
        return np.interp(y, self.y_grid, self.lambdas)

    def eta_paths(self, bundle, y_start) -> Optional[np.ndarray]:
        """Values of the interpolated control along the paths of one period, shape (K, P)."""
        if self.controls is None:
            return None
        g = self.y_grid
        G = g.size
        ys = np.asarray(y_start, dtype=float)
        if G == 1:
            j = np.zeros(ys.shape, dtype=np.intp)
            om = np.zeros(ys.shape)
            nxt = j
        else:
            j = np.clip(np.searchsorted(g, ys, side="right") - 1, 0, G - 2)
            om = np.clip((ys - g[j]) / (g[j + 1] - g[j]), 0.0, 1.0)
            nxt = j + 1
        V = np.stack([c.values for c in self.controls])          # (G, nt, ny)
        off = np.stack([c.ys - y for c, y in zip(self.controls, g)])  # (G, ny)
        Vp = (1.0 - om)[:, None, None] * V[j] + om[:, None, None] * V[nxt]
        offp = (1.0 - om)[:, None] * off[j] + om[:, None] * off[nxt]
        times = self.controls[0].times
        eta_max = self.controls[0].eta_max
        K = bundle.n_steps
        st = TensorStencil(times, [0.0], bundle.t[:-1], bundle.Y[:1, :1])
        ny = offp.shape[1]
        out = np.empty((K, ys.size))
        rows = np.arange(ys.size)
        for k in range(K):
            row = np.einsum("a,pay->py", st.Wt[k], Vp)
            if ny == 1:
                out[k] = row[:, 0]
                continue
            rel = bundle.Y[k] - ys
            # per-path knots are increasing; locate by comparison count
            idx = np.clip((rel[:, None] >= offp).sum(axis=1) - 1, 0, ny - 2)
            lo = offp[rows, idx]
            hi = offp[rows, idx + 1]
            w = np.clip((rel - lo) / (hi - lo), 0.0, 1.0)
            out[k] = row[rows, idx] + w * (row[rows, idx + 1] - row[rows, idx])
        return np.clip(out, -eta_max, eta_max)


# ---------------------------------------------------------------------------
# wealth along the horizon
# ---------------------------------------------------------------------------

def _period_log_density(model, bundle, eta_paths):
    th = theta(model, bundle.Y[:-1])
    dt = bundle.dt
    lz = np.sum(-th * bundle.dW1 - 0.5 * th * th * dt, axis=0)
    if eta_paths is not None:
        lz = lz + np.sum(eta_paths * bundle.dW2 - 0.5 * eta_paths * eta_paths * dt, axis=0)
    return lz - model.r * bundle.tau


def concatenate_optimal_wealth(model: MarketModel, spec: UtilitySpec, A_star, table: Optional[SolutionTable],
                               x0: float, y0: float, plan: HorizonPlan,
                               allow_uncertified: bool = False) -> WealthPath:
    """Concatenated optimal terminal wealths ``X*_{T_0..T_N}``.

    Each period uses the one-period solution interpolated at the path's
    starting factor value.  Log utility needs no table (``lambda* = 1``,
    ``eta* = 0``, so ``X*`` grows by ``B / Z^0``).
    """
    if not x0 > 0:
        raise UsageError("x0 must be positive")
    if spec.kind == "log":
        table = SolutionTable.constant(1.0)
    elif table is None:
        raise UsageError("power concatenation needs per-period solutions")
    if not table.certified and not allow_uncertified:
        raise UsageError("period solutions are not certified; pass allow_uncertified to proceed")
    A_star = as_grid_function(A_star)
    N, P = plan.n_periods, plan.sim.n_paths
    logX = np.empty((N + 1, P))
    Y = np.empty((N + 1, P))
    LD = np.empty((N + 1, P))
    logX[0], Y[0], LD[0] = math.log(x0), y0, 0.0
    for n in range(1, N + 1):
        b = simulate_factor(model, Y[n - 1] if n > 1 else y0, plan.sim, stream=plan.stream(n))
        lw = _period_log_density(model, b, table.eta_paths(b, Y[n - 1]))
        lam = table.lam_at(Y[n - 1])
        yt = b.Y[-1]
        kern = bind(spec, spec.h(yt), A_star(yt))
        logX[n] = logX[n - 1] + np.log(kern.inverse(lam * np.exp(lw)))
        Y[n] = yt
        LD[n] = LD[n - 1] + lw
    return WealthPath(logX, Y, LD, plan.sim.antithetic, plan.tau)


def simulate_policy_path(model: MarketModel, policy, x0: float, y0: float, plan: HorizonPlan) -> WealthPath:
    """Wealth under a stationary feedback policy ``pi(t - T_{n-1}, Y_t)`` over the horizon."""
    N, P = plan.n_periods, plan.sim.n_paths
    logX = np.empty((N + 1, P))
    Y = np.empty((N + 1, P))
    LD = np.empty((N + 1, P))
    logX[0], Y[0], LD[0] = math.log(x0), y0, 0.0
    clamped = 0
    for n in range(1, N + 1):
        b = simulate_factor(model, Y[n - 1] if n > 1 else y0, plan.sim, stream=plan.stream(n))
        b = simulate_wealth(model, policy, 1.0, b)
        clamped += b.n_clamped
        logX[n] = logX[n - 1] + b.logX[-1]
        Y[n] = b.Y[-1]
        LD[n] = LD[n - 1] + _period_log_density(model, b, None)
    return WealthPath(logX, Y, LD, plan.sim.antithetic, plan.tau, clamped)


def _strategy_path(model, spec, strategy, x0, y0, plan, A_star=None, table=None, allow_uncertified=False):
    if isinstance(strategy, WealthPath):
        return strategy
    if isinstance(strategy, str):
        if strategy != "optimal":
            raise UsageError("strategy string must be 'optimal'")
        if spec.kind == "log":
            return simulate_policy_path(model, FeedbackPolicy.merton_log(pi_max=math.inf), x0, y0, plan)
        return concatenate_optimal_wealth(model, spec, A_star, table, x0, y0, plan, allow_uncertified)
    return simulate_policy_path(model, strategy, x0, y0, plan)


# ---------------------------------------------------------------------------
# objective, D_n and drift checks
# ---------------------------------------------------------------------------

def period_utilities(spec: UtilitySpec, path: WealthPath) -> np.ndarray:
    """``U(X_{T_i} / X_{T_{i-1}}^gamma, Y_{T_i})`` for ``i = 1..N``, shape (N, P)."""
    lr = path.logX[1:] - spec.gamma * path.logX[:-1]
    h = spec.h(path.Y[1:])
    if spec.kind == "log":
        return lr + h
    return np.exp(spec.alpha * lr) * h / spec.alpha


def d_series(spec: UtilitySpec, A_star, path: WealthPath) -> np.ndarray:
    """``D_n`` for ``n = 0..N`` along every path, shape (N + 1, P)."""
    A_star = as_grid_function(A_star)
    N = path.n_periods
    disc = np.exp(-spec.delta * path.tau * np.arange(N + 1))
    U = period_utilities(spec, path)
    run = np.zeros_like(path.logX)
    run[1:] = np.cumsum(disc[1:, None] * U, axis=0)
    if spec.kind == "log":
        cont = A_star(path.Y) + C_star(spec.gamma, spec.delta, spec.tau) * path.logX
    else:
        cont = A_star(path.Y) * np.exp(spec.alpha * (1.0 - spec.gamma) * path.logX) / spec.alpha
    return run + disc[:, None] * cont


@dataclass(frozen=True)
class DriftReport:
    """Per-(period, factor-bin) drift of ``D_n`` with pass flags."""

    rows: tuple
    supermartingale_ok: bool
    martingale_ok: bool
    merged_bins: int
    max_z: float
    min_z: float

    def to_dict(self) -> dict:
        return {"supermartingale_ok": self.supermartingale_ok, "martingale_ok": self.martingale_ok,
                "merged_bins": self.merged_bins, "max_z": self.max_z, "min_z": self.min_z,
                "n_cells": len(self.rows)}


def _bins(y: np.ndarray, n_bins: int, min_count: int):
    """Quantile bins of ``y``; bins with fewer than ``min_count`` paths are merged into a neighbour."""
    edges = np.unique(np.quantile(y, np.linspace(0.0, 1.0, n_bins + 1)))
    if edges.size < 2:
        return [np.ones(y.size, dtype=bool)], [(float(y.min()), float(y.max()))], 0
    idx = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, edges.size - 2)
    groups = [[i] for i in range(edges.size - 1)]
    counts = [int(np.sum(idx == i)) for i in range(edges.size - 1)]
    merged = 0
    i = 0
    while len(groups) > 1 and i < len(groups):
        if counts[i] < min_count:
            j = i + 1 if i + 1 < len(groups) else i - 1
            a, b = min(i, j), max(i, j)
            groups[a] = groups[a] + groups[b]
            counts[a] += counts[b]
            del groups[b], counts[b]
            merged += 1
            i = 0
            continue
        i += 1
    masks = [np.isin(idx, g) for g in groups]
    ranges = [(float(edges[g[0]]), float(edges[g[-1] + 1])) for g in groups]
    return masks, ranges, merged


def supermartingale_check(model: MarketModel, spec: UtilitySpec, A_star, strategy, plan: HorizonPlan,
                          x0: float = 1.0, y0: float = 0.0, table: Optional[SolutionTable] = None,
                          n_bins: int = 8, min_count: int = 100, k: float = 3.0,
                          allow_uncertified: bool = False, A_se=None) -> DriftReport:
    """Binned conditional drift ``E[D_{n+1} - D_n | Y_{T_n} in bin]``.

    ``strategy`` is a feedback policy, a :class:`WealthPath`, or ``"optimal"``.
    Supermartingale: every drift ``<= k SE``; martingale: every ``|drift| <= k SE``.

    ``A_se`` is the sampling error of one operator evaluation at the solved
    ``A*`` (a grid function or constant).  ``A*`` is a fixed point of the
    operator on the solve sample, so a fresh sample sees ``Psi(A*) - A*`` with
    that spread; it enters each cell's SE through the continuation term at ``T_n``.
    """
    path = _strategy_path(model, spec, strategy, x0, y0, plan, A_star, table, allow_uncertified)
    D = d_series(spec, A_star, path)
    A_err = None
    if A_se is not None:
        A_se = as_grid_function(A_se)
        A_err = np.exp(-spec.delta * path.tau * np.arange(path.n_periods + 1))[:, None] * A_se(path.Y)
        if spec.kind == "power":
            A_err = A_err * np.exp(spec.alpha * (1.0 - spec.gamma) * path.logX) / abs(spec.alpha)
    rows = []
    merged_total = 0
    for n in range(path.n_periods):
        inc = D[n + 1] - D[n]
        masks, ranges, merged = _bins(path.Y[n], n_bins, min_count)
        merged_total += merged
        for b, (m, (lo, hi)) in enumerate(zip(masks, ranges)):
            est = estimate(inc[m], False)
            if A_err is not None:
                est = Estimate(est.mean, math.hypot(est.se, float(np.mean(A_err[n][m]))), est.n)
            z = est.mean / est.se if est.se > 0 else (0.0 if abs(est.mean) < 1e-12 else math.copysign(math.inf, est.mean))
            rows.append({"n": n, "bin": b, "y_lo": lo, "y_hi": hi, "count": int(m.sum()), "drift": est.mean,
                         "se": est.se, "z": z})
    zs = np.array([r["z"] for r in rows])
    return DriftReport(tuple(rows), bool(np.all(zs <= k)), bool(np.all(np.abs(zs) <= k)), merged_total,
                       float(zs.max()), float(zs.min()))


def budget_chain(path: WealthPath) -> List[Estimate]:
    """``E[(Z_{T_n} / B_{T_n}) X_{T_n}]`` for ``n = 0..N``."""
    return [estimate(np.exp(path.log_deflator[n] + path.logX[n]), path.antithetic) for n in range(path.n_periods + 1)]


@dataclass(frozen=True)
class ObjectiveEstimate:
    value: Estimate
    tail_bound: float
    n_periods: int

    def to_dict(self) -> dict:
        return {"value": self.value.to_dict(), "tail_bound": self.tail_bound, "n_periods": self.n_periods}


def tail_bound(model: MarketModel, spec: UtilitySpec, x0: float, N: int, M0: float,
               path: Optional[WealthPath] = None) -> float:
    """Bound on the objective terms beyond period ``N``.

    Power, ``alpha`` in (0, 1): ``(1/alpha) e^{(zeta(alpha) - delta) tau} x^{alpha(1-gamma)} a^N / (1 - a)``
    with ``a = e^{(zeta(alpha(1-gamma)) - delta) tau}``; valid for every admissible strategy.
    Log: the same chain with the per-period log growth in ``[0, (r + M0/2) tau]``
    (strategies at least as good as cash in expected log growth).
    Power, ``alpha < 0``: magnitude of the optimally continued tail,
    ``e^{-delta T_N} (1/|alpha|) A_upper E[X_N^{alpha(1-gamma)}]``, estimated on ``path``.
    """
    d, t, g = spec.delta, spec.tau, spec.gamma
    if spec.kind == "log":
        i = np.arange(N + 1, N + 20001, dtype=float)
        gh = (model.r + M0 / 2.0) * t
        terms = np.exp(-d * t * i) * (gh * (1.0 + (1.0 - g) * (i - 1.0)) + (1.0 - g) * abs(math.log(x0)) + 1.0)
        return float(terms.sum())
    a = spec.alpha
    if a > 0:
        ratio = math.exp((zeta(model.r, M0, a * (1.0 - g)) - d) * t)
        return (math.exp((zeta(model.r, M0, a) - d) * t) * x0 ** (a * (1.0 - g)) * ratio ** N
                / (a * (1.0 - ratio)))
    if path is None:
        raise UsageError("alpha < 0 tail bound needs simulated wealth at the horizon")
    hi = power_A_bounds(model, spec, M0)[1]
    return float(math.exp(-d * t * N) * hi / abs(a) * np.mean(np.exp(a * (1.0 - g) * path.logX[N])))


def default_horizon(model: MarketModel, spec: UtilitySpec, x0: float, M0: float, value_scale: float,
                    rel: float = 1e-3, n_max: int = 2000) -> int:
    """Smallest ``N`` with ``tail_bound < rel |value_scale|`` (``alpha > 0`` power and log)."""
    for N in range(1, n_max + 1):
        if tail_bound(model, spec, x0, N, M0) < rel * abs(value_scale):
            return N
    raise UsageError("tail does not fall below the requested level")


def evaluate_objective(model: MarketModel, spec: UtilitySpec, strategy, x0: float, y0: float, plan: HorizonPlan,
                       A_star=None, M0: Optional[float] = None, table: Optional[SolutionTable] = None,
                       allow_uncertified: bool = False) -> ObjectiveEstimate:
    """Truncated objective ``sum_{i<=N} e^{-delta T_i} U(X_{T_i}/X_{T_{i-1}}^gamma, Y_{T_i})`` with a tail bound."""
    if M0 is None:
        M0 = model.M0 if model.M0 is not None else float(theta(model, y0)) ** 2
    path = _strategy_path(model, spec, strategy, x0, y0, plan, A_star, table, allow_uncertified)
    N = path.n_periods
    disc = np.exp(-spec.delta * path.tau * np.arange(1, N + 1))
    samples = np.sum(disc[:, None] * period_utilities(spec, path), axis=0)
    return ObjectiveEstimate(estimate(samples, path.antithetic), tail_bound(model, spec, x0, N, M0, path), N)
