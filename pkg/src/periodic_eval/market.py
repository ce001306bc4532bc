"""Market and factor model: coefficient families, market price of risk, growth function.

The risky asset follows ``dS = mu(Y) S dt + sigma(Y) S dW1`` and the factor
``dY = b(Y) dt + beta(Y) (rho dW1 + sqrt(1 - rho^2) dW2)``; the bank account
grows at the constant rate ``r``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, UsageError

KINDS = ("constant", "affine", "sigmoid", "table")


@dataclass(frozen=True)
class CoefficientFunction:
    """A bounded parametric coefficient ``f(y)``.

    Kinds
    -----
    constant : ``c``
    affine   : ``a + b * clip(y, lo, hi)`` (truncated to a working range)
    sigmoid  : ``lo + (hi - lo) / (1 + exp(-(y - center) / scale))``
    table    : linear interpolation on knots, constant extrapolation

    Use the named constructors rather than the raw fields.
    """

    kind: str
    params: tuple = ()
    knots: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "table":
            k = np.asarray(self.knots, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if k.ndim != 1 or k.size == 0 or k.shape != v.shape:
                raise UsageError("table needs matching, nonempty knots and values")
            if np.any(np.diff(k) <= 0):
                raise UsageError("table knots must be strictly increasing")
            if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
                raise UsageError("table entries must be finite")
        elif self.kind == "sigmoid" and self.params[3] <= 0:
            raise UsageError("sigmoid scale must be positive")

    # -- constructors -------------------------------------------------
    @classmethod
    def constant(cls, c: float) -> "CoefficientFunction":
        return cls("constant", (float(c),))

    @classmethod
    def affine(cls, a: float, b: float, lo: float = -math.inf, hi: float = math.inf):
        if lo > hi:
            raise UsageError("affine working range must satisfy lo <= hi")
        return cls("affine", (float(a), float(b), float(lo), float(hi)))

    @classmethod
    def sigmoid(cls, lo: float, hi: float, center: float = 0.0, scale: float = 1.0):
        return cls("sigmoid", (float(lo), float(hi), float(center), float(scale)))

    @classmethod
    def table(cls, knots: Sequence[float], values: Sequence[float]):
        return cls("table", (), tuple(float(k) for k in knots), tuple(float(v) for v in values))

    # -- evaluation ---------------------------------------------------
    def __call__(self, y):
        ya = np.asarray(y, dtype=float)
        if self.kind == "constant":
            out = np.full(ya.shape, self.params[0])
        elif self.kind == "affine":
            a, b, lo, hi = self.params
            out = a + b * np.clip(ya, lo, hi)
        elif self.kind == "sigmoid":
            lo, hi, c, s = self.params
            out = lo + (hi - lo) * (0.5 * (1.0 + np.tanh(0.5 * (ya - c) / s)))
        else:
            out = np.interp(ya, self.knots, self.values)
        if np.ndim(y) == 0:
            return float(out)
        return out

    @property
    def is_constant(self) -> bool:
        if self.kind == "constant":
            return True
        if self.kind == "affine":
            return self.params[1] == 0.0 or self.params[2] == self.params[3]
        if self.kind == "sigmoid":
            return self.params[0] == self.params[1]
        return len(set(self.values)) == 1

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.params[0]}
        if self.kind == "affine":
            a, b, lo, hi = self.params
            d = {"kind": "affine", "a": a, "b": b}
            if math.isfinite(lo):
                d["lo"] = lo
            if math.isfinite(hi):
                d["hi"] = hi
            return d
        if self.kind == "sigmoid":
            lo, hi, c, s = self.params
            return {"kind": "sigmoid", "lo": lo, "hi": hi, "center": c, "scale": s}
        return {"kind": "table", "knots": list(self.knots), "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientFunction":
        kind = d.get("kind")
        if kind == "constant":
            return cls.constant(d["value"])
        if kind == "affine":
            return cls.affine(d["a"], d["b"], d.get("lo", -math.inf), d.get("hi", math.inf))
        if kind == "sigmoid":
            return cls.sigmoid(d["lo"], d["hi"], d.get("center", 0.0), d.get("scale", 1.0))
        if kind == "table":
            return cls.table(d["knots"], d["values"])
        raise UsageError(f"unknown coefficient kind {kind!r}")


@dataclass(frozen=True)
class MarketModel:
    """One risky asset, a bank account and one scalar factor.

    ``M0`` is the bound on the squared market price of risk; when omitted
    it is estimated on the working factor grid (see :func:`estimate_M0`).
    """

    r: float
    mu: CoefficientFunction
    sigma: CoefficientFunction
    b: CoefficientFunction = field(default_factory=lambda: CoefficientFunction.constant(0.0))
    beta: CoefficientFunction = field(default_factory=lambda: CoefficientFunction.constant(0.0))
    rho: float = 0.0
    M0: Optional[float] = None

    def __post_init__(self):
        if not abs(self.rho) <= 1.0:
            raise UsageError("correlation rho must lie in [-1, 1]")
        if not self.r >= 0.0:
            raise UsageError("risk-free rate r must be nonnegative")
        if self.M0 is not None and not self.M0 >= 0.0:
            raise UsageError("M0 must be nonnegative")

    @property
    def price_coefficients_constant(self) -> bool:
        """True when mu and sigma (hence theta) do not depend on the factor."""
        return self.mu.is_constant and self.sigma.is_constant

    def theta(self, y):
        return theta(self, y)


def _sigma_checked(model: MarketModel, y):
    s = model.sigma(y)
    if np.any(np.asarray(s) <= 0.0):
        raise DomainError("volatility must be strictly positive")
    return s


def theta(model: MarketModel, y):
    """Market price of risk ``(mu(y) - r) / sigma(y)``."""
    s = _sigma_checked(model, y)
    return (model.mu(y) - model.r) / s


def zeta(r: float, M0: float, x):
    """Growth function ``r x + x M0 / (2 (1 - x))`` defined for ``x < 1``."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa >= 1.0):
        raise DomainError("zeta has a pole at x = 1; need x < 1")
    out = r * xa + xa * M0 / (2.0 * (1.0 - xa))
    return float(out) if np.ndim(x) == 0 else out


def estimate_M0(model: MarketModel, y_grid) -> float:
    """Largest squared market price of risk over a factor grid.

    The grid should be at least as wide as the working factor grid.
    """
    g = np.asarray(y_grid, dtype=float).ravel()
    if g.size == 0:
        raise UsageError("estimate_M0 needs a nonempty grid")
    th = theta(model, g)
    return float(np.max(th * th))


def effective_M0(model: MarketModel, y_grid=None) -> float:
    """Supplied M0, checked against the grid estimate when a grid is given.

    Raises :class:`UsageError` when the grid estimate exceeds the supplied
    value, since every downstream bound relies on M0.
    """
    if y_grid is None:
        if model.M0 is None:
            raise UsageError("M0 not supplied and no grid to estimate it on")
        return float(model.M0)
    est = estimate_M0(model, y_grid)
    if model.M0 is None:
        return est
    if est > model.M0 * (1.0 + 1e-12) + 1e-15:
        raise UsageError(f"grid estimate of theta^2 ({est:.6g}) exceeds supplied M0 ({model.M0:.6g})")
    return float(model.M0)


@dataclass(frozen=True)
class AssumptionReport:
    passed: bool
    kind: str
    margin: float
    zeta_value: float
    M0: float
    message: str

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "kind": self.kind,
            "margin": self.margin,
            "zeta_alpha_1_minus_gamma": self.zeta_value,
            "M0": self.M0,
            "message": self.message,
        }


def check_standing_assumption(model: MarketModel, spec, y_grid=None) -> AssumptionReport:
    """Check ``delta > max(zeta(alpha (1 - gamma)), 0)`` (power) or ``delta > 0`` (log).

    Never raises for a failing parameter set; the report carries the verdict.
    A supplied M0 below the grid estimate is reported as a failure too.
    """
    try:
        M0 = effective_M0(model, y_grid)
    except UsageError as exc:
        return AssumptionReport(False, spec.kind, float("nan"), float("nan"), float("nan"), str(exc))
    if y_grid is not None:
        b = np.asarray(model.beta(np.asarray(y_grid, dtype=float)))
        if np.any(b == 0.0) and not np.all(b == 0.0):
            return AssumptionReport(False, spec.kind, float("nan"), float("nan"), M0,
                                    "factor volatility beta vanishes at some grid points")
    if spec.kind == "log":
        ok = spec.delta > 0
        return AssumptionReport(ok, "log", spec.delta, 0.0, M0,
                                "delta > 0" if ok else "log utility needs delta > 0")
    z = zeta(model.r, M0, spec.alpha * (1.0 - spec.gamma))
    margin = spec.delta - z
    ok = spec.delta > max(z, 0.0)
    msg = "delta > max(zeta(alpha(1-gamma)), 0)" if ok else (
        f"delta={spec.delta:g} does not exceed max(zeta(alpha(1-gamma))={z:.6g}, 0)")
    return AssumptionReport(ok, "power", margin, z, M0, msg)


def default_factor_grid(model: MarketModel, y0: float, n: int = 41, width: float = 5.0,
                        tau: float = 1.0) -> np.ndarray:
    """Grid of ``n`` points spanning ``y0 +/- width`` stationary standard deviations.

    The stationary spread is taken from the local linearization
    ``b(y) ~ -kappa (y - ybar)`` at ``y0``; when the drift is not mean reverting
    the spread over ``10 tau`` time units is used instead.
    """
    eps = 1e-4
    kappa = -(model.b(y0 + eps) - model.b(y0 - eps)) / (2 * eps)
    bet = abs(model.beta(y0))
    if bet == 0.0:
        sd = 1.0
    elif kappa > 0:
        sd = bet / math.sqrt(2.0 * kappa)
    else:
        sd = bet * math.sqrt(10.0 * tau)
    if n == 1:
        return np.array([float(y0)])
    return np.linspace(y0 - width * sd, y0 + width * sd, n)
