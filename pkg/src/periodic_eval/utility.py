"""Modified utility ``h_A``, its marginal, inverse marginal and convex conjugate.

For power utility with ``alpha`` in ``(-inf, 0) U (0, 1)`` and ``gamma`` in ``(0, 1]``::

    h_A(x, y) = (1/alpha) x^alpha h(y) + (1/alpha) A(y) x^(alpha (1 - gamma))

For log utility the one-period objective is ``log x`` (``h`` and ``A`` enter
additively outside the optimization), so the same kernel interface returns
``log x``, ``1/x``, ``1/u`` and ``-log u - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DomainError, NumericalFailure, UsageError

_LN2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Tabulated function on a strictly increasing grid.

    Linear interpolation inside the grid, constant (clamped) extrapolation outside.
    """

    y: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        v = np.array(self.values, dtype=float).ravel()
        if y.size == 0 or y.shape != v.shape:
            raise UsageError("grid and values must be nonempty with equal length")
        if np.any(np.diff(y) <= 0):
            raise UsageError("grid must be strictly increasing")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(v))):
            raise UsageError("grid function entries must be finite")
        y.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, c: float, y=(0.0,)) -> "GridFunction":
        y = np.asarray(y, dtype=float).ravel()
        return cls(y, np.full(y.size, float(c)))

    def __call__(self, y):
        out = np.interp(np.asarray(y, dtype=float), self.y, self.values)
        return float(out) if np.ndim(y) == 0 else out

    @property
    def sup(self) -> float:
        return float(self.values.max())

    @property
    def inf(self) -> float:
        return float(self.values.min())

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.y, values)

    def distance(self, other: "GridFunction") -> float:
        """Sup-norm distance evaluated on the union of both grids."""
        pts = np.union1d(self.y, other.y)
        return float(np.max(np.abs(self(pts) - other(pts))))

    def __eq__(self, other):
        return (isinstance(other, GridFunction) and np.array_equal(self.y, other.y)
                and np.array_equal(self.values, other.values))

    __hash__ = None


Scalar = Union[float, GridFunction]


def as_grid_function(f: Scalar) -> GridFunction:
    return f if isinstance(f, GridFunction) else GridFunction.constant(float(f))


@dataclass(frozen=True)
class UtilitySpec:
    """Per-period utility and evaluation parameters.

    ``h`` takes values in ``[m, 1]``; ``m`` defaults to ``min h``.
    """

    kind: str
    gamma: float
    delta: float
    tau: float
    h: GridFunction
    alpha: Optional[float] = None
    m: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("power", "log"):
            raise UsageError("utility kind must be 'power' or 'log'")
        if not isinstance(self.h, GridFunction):
            object.__setattr__(self, "h", as_grid_function(self.h))
        if self.kind == "power":
            if self.alpha is None or not (self.alpha < 1.0) or self.alpha == 0.0:
                raise UsageError("power utility needs alpha in (-inf, 0) U (0, 1)")
        if not (0.0 < self.gamma <= 1.0):
            raise UsageError("gamma must lie in (0, 1]")
        if not self.delta > 0.0:
            raise UsageError("delta must be positive")
        if not self.tau > 0.0:
            raise UsageError("tau must be positive")
        m = self.h.inf if self.m is None else float(self.m)
        if not (0.0 < m <= 1.0):
            raise UsageError("lower bound m of h must lie in (0, 1]")
        if self.h.inf < m - 1e-15 or self.h.sup > 1.0 + 1e-15:
            raise UsageError("h must take values in [m, 1]")
        object.__setattr__(self, "m", m)

    @classmethod
    def power(cls, alpha, gamma, delta, tau=1.0, h: Scalar = 1.0, m=None) -> "UtilitySpec":
        return cls("power", float(gamma), float(delta), float(tau), as_grid_function(h), float(alpha), m)

    @classmethod
    def log(cls, gamma, delta, tau=1.0, h: Scalar = 1.0, m=None) -> "UtilitySpec":
        return cls("log", float(gamma), float(delta), float(tau), as_grid_function(h), None, m)


# ---------------------------------------------------------------------------
# kernels bound to per-path values of h(Y) and A(Y)
# ---------------------------------------------------------------------------

def _positive(x, name="x"):
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0.0)):
        raise DomainError(f"{name} must be strictly positive")
    return xa


class PowerKernel:
    """``h_A`` for fixed arrays ``hv = h(y)``, ``av = A(y)`` (broadcastable)."""

    kind = "power"

    def __init__(self, alpha: float, gamma: float, hv, av):
        self.alpha = float(alpha)
        self.gamma = float(gamma)
        self.hv = np.asarray(hv, dtype=float)
        self.av = np.asarray(av, dtype=float)
        if np.any(self.av < 0):
            raise DomainError("A must be nonnegative")
        self.p1 = self.alpha - 1.0
        self.q = self.alpha * (1.0 - self.gamma)
        self.p2 = self.q - 1.0
        self.c2 = self.av * (1.0 - self.gamma)

    def value(self, x):
        x = _positive(x)
        return (x ** self.alpha * self.hv + self.av * x ** self.q) / self.alpha

    def marginal(self, x):
        x = _positive(x)
        return x ** self.p1 * self.hv + self.c2 * x ** self.p2

    def second(self, x):
        x = _positive(x)
        return self.p1 * x ** (self.p1 - 1.0) * self.hv + self.c2 * self.p2 * x ** (self.p2 - 1.0)

    def ell(self, x):
        x = _positive(x)
        return ((1.0 / self.alpha - 1.0) * x ** self.alpha * self.hv
                + (1.0 / self.alpha - (1.0 - self.gamma)) * self.av * x ** self.q)

    def inverse(self, u):
        """Solve ``marginal(x) = u``; vectorized, relative tolerance about 1e-13.

        Works in ``s = log x`` where ``g(s) = log marginal(e^s) - log u`` is
        decreasing and convex.  The root is bracketed by the single-term roots
        at ``u`` and ``u/2``; Newton steps from the left end of the bracket
        are monotone, with bisection as the safeguard.
        """
        u = _positive(u, "u")
        u, hv, c2 = np.broadcast_arrays(u, self.hv, self.c2)
        out = np.empty(u.shape)
        single = c2 == 0.0
        if np.any(single):
            out[single] = (u[single] / hv[single]) ** (1.0 / self.p1)
        two = ~single
        if np.any(two):
            out[two] = np.exp(self._solve_log(np.log(u[two]), np.log(hv[two]), np.log(c2[two])))
        return out if out.ndim else float(out)

    def _solve_log(self, lu, lh, lc):
        p1, p2 = self.p1, self.p2
        sa = (lu - lh) / p1
        sb = (lu - lc) / p2
        lo = np.maximum(sa, sb)
        hi = np.maximum(sa - _LN2 / p1, sb - _LN2 / p2)
        s = lo.copy()
        for _ in range(200):
            l1 = lh + p1 * s
            l2 = lc + p2 * s
            mx = np.maximum(l1, l2)
            e1 = np.exp(l1 - mx)
            e2 = np.exp(l2 - mx)
            tot = e1 + e2
            g = mx + np.log(tot) - lu
            gp = (p1 * e1 + p2 * e2) / tot
            lo = np.where(g > 0, s, lo)
            hi = np.where(g < 0, s, hi)
            new = s - g / gp
            bad = ~((new >= lo) & (new <= hi))
            new = np.where(bad, 0.5 * (lo + hi), new)
            done = (np.abs(new - s) <= 1e-14 * np.maximum(1.0, np.abs(s))) | (
                np.abs(g) <= 4e-16 * (1.0 + np.abs(lu) + np.abs(mx)))
            s = np.where(np.abs(g) <= 4e-16 * (1.0 + np.abs(lu) + np.abs(mx)), s, new)
            if np.all(done):
                return s
        raise NumericalFailure("inverse marginal did not converge in 200 iterations")

    def conjugate(self, u):
        x = self.inverse(u)
        return self.value(x) - np.asarray(u) * x

    def conjugate_and_argmax(self, u):
        x = self.inverse(u)
        return self.value(x) - np.asarray(u) * x, x


class LogKernel:
    """Kernel of the log one-period objective ``log x``."""

    kind = "log"

    def value(self, x):
        return np.log(_positive(x))

    def marginal(self, x):
        return 1.0 / _positive(x)

    def second(self, x):
        return -1.0 / _positive(x) ** 2

    def ell(self, x):
        return np.log(_positive(x)) - 1.0

    def inverse(self, u):
        return 1.0 / _positive(u, "u")

    def conjugate(self, u):
        return -np.log(_positive(u, "u")) - 1.0

    def conjugate_and_argmax(self, u):
        u = _positive(u, "u")
        return -np.log(u) - 1.0, 1.0 / u


def bind(spec: UtilitySpec, hv=1.0, av=0.0):
    """Kernel for a utility specification with ``h`` and ``A`` already evaluated."""
    if spec.kind == "log":
        return LogKernel()
    return PowerKernel(spec.alpha, spec.gamma, hv, av)


def kernel_at(spec: UtilitySpec, A: Scalar, y):
    A = as_grid_function(A)
    return bind(spec, spec.h(y), A(y))


# ---------------------------------------------------------------------------
# public scalar/vector API
# ---------------------------------------------------------------------------

def _out(v, *args):
    return float(v) if all(np.ndim(a) == 0 for a in args) else v


def h_A_value(x, y, A: Scalar, spec: UtilitySpec):
    """Modified utility ``(1/alpha) x^alpha h(y) + (1/alpha) A(y) x^(alpha(1-gamma))``."""
    return _out(kernel_at(spec, A, y).value(x), x, y)


def h_A_marginal(x, y, A: Scalar, spec: UtilitySpec):
    return _out(kernel_at(spec, A, y).marginal(x), x, y)


def h_A_second(x, y, A: Scalar, spec: UtilitySpec):
    return _out(kernel_at(spec, A, y).second(x), x, y)


def inverse_marginal(u, y, A: Scalar, spec: UtilitySpec):
    """The inverse ``I(u, y)`` of the marginal utility in ``x``."""
    return _out(kernel_at(spec, A, y).inverse(u), u, y)


maximizer_x_star = inverse_marginal


def conjugate(u, y, A: Scalar, spec: UtilitySpec):
    """Legendre-Fenchel transform ``sup_x {h_A(x, y) - u x}`` evaluated via the maximizer."""
    return _out(kernel_at(spec, A, y).conjugate(u), u, y)


def ell(x, y, A: Scalar, spec: UtilitySpec):
    """``h_A(x) - x h_A'(x)``."""
    return _out(kernel_at(spec, A, y).ell(x), x, y)


def arrow_pratt_rra(x, y, A: Scalar, spec: UtilitySpec):
    """Relative risk aversion ``-x h_A''(x) / h_A'(x)``."""
    k = kernel_at(spec, A, y)
    xa = np.asarray(x, dtype=float)
    return _out(-xa * k.second(xa) / k.marginal(xa), x, y)


def sandwich_constants(A: Scalar, spec: UtilitySpec):
    """``(kappa, rho)`` with ``kappa = (2/alpha) max(1, sup A)`` and ``rho = alpha``.

    For ``alpha`` in (0, 1): ``0 < h_A <= kappa (1 + x^rho)``;
    for ``alpha < 0``: ``0 > h_A >= kappa (1 + x^rho)``.
    """
    if spec.kind != "power":
        raise UsageError("sandwich constants are defined for power utility")
    A = as_grid_function(A)
    return 2.0 / spec.alpha * max(1.0, A.sup), spec.alpha


def marginal_scaling_factor(varrho: float, spec: UtilitySpec) -> float:
    """``max(varrho^(alpha-1), varrho^(alpha(1-gamma)-1))`` for ``varrho > 1``."""
    a, g = spec.alpha, spec.gamma
    return max(varrho ** (a - 1.0), varrho ** (a * (1.0 - g) - 1.0))
