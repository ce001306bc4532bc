"""Seed-reproducible Euler-Maruyama simulation of the factor, price, wealth and dual density.

Random numbers come from counter-based Philox streams keyed by
``(seed, stream, block)`` with blocks of ``BLOCK`` paths, so the draws of
path ``i`` at step ``k`` depend only on ``(seed, stream, i, k)``: not on the
total number of paths, the number of steps beyond ``k``, or worker count.
Wealth and dual density are simulated in log space on the shared increments.
"""
from __future__ import annotations

import dataclasses
import math
import struct
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import UsageError
from .knots import bilinear
from .market import MarketModel, theta

BLOCK = 4096
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SimulationConfig:
    """Paths, steps per period, seed and period length."""

    n_paths: int = 2 ** 16
    n_steps: int = 64
    seed: int = 0
    tau: float = 1.0
    antithetic: bool = False

    def __post_init__(self):
        if int(self.n_paths) < 1 or int(self.n_steps) < 1:
            raise UsageError("n_paths and n_steps must be positive")
        if not self.tau > 0:
            raise UsageError("tau must be positive")
        if self.antithetic and self.n_paths % 2:
            raise UsageError("antithetic sampling needs an even number of paths")

    @property
    def dt(self) -> float:
        return self.tau / self.n_steps


def _block_normals(seed: int, stream: int, block: int, n_steps: int) -> np.ndarray:
    key = np.array([seed & _MASK64, ((stream & 0xFFFFFFFF) << 32) | block], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal((n_steps, 2, BLOCK))


@lru_cache(maxsize=4)
def _increments(seed: int, n_paths: int, n_steps: int, tau: float, stream: int, antithetic: bool):
    base = n_paths // 2 if antithetic else n_paths
    n_blocks = -(-base // BLOCK)
    z = np.empty((n_steps, 2, n_blocks * BLOCK))
    for blk in range(n_blocks):
        z[:, :, blk * BLOCK:(blk + 1) * BLOCK] = _block_normals(seed, stream, blk, n_steps)
    z = z[:, :, :base]
    if antithetic:
        z = np.concatenate([z, -z], axis=2)
    z *= math.sqrt(tau / n_steps)
    dW1 = np.ascontiguousarray(z[:, 0, :])
    dW2 = np.ascontiguousarray(z[:, 1, :])
    dW1.setflags(write=False)
    dW2.setflags(write=False)
    return dW1, dW2


def brownian_increments(cfg: SimulationConfig, stream: int = 0):
    """Independent increments ``(dW1, dW2)``, each of shape ``(n_steps, n_paths)``."""
    return _increments(int(cfg.seed), int(cfg.n_paths), int(cfg.n_steps), float(cfg.tau),
                       int(stream), bool(cfg.antithetic))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Simulated trajectories on the step grid ``t_0 < ... < t_K``.

    Arrays of paths have shape ``(K, P)`` for increments and ``(K + 1, P)``
    for state processes.  Wealth, price and density are stored as logs.
    """

    t: np.ndarray
    dW1: np.ndarray
    dW2: np.ndarray
    Y: np.ndarray
    y0: object  # float, or per-path array when periods are chained
    seed: int
    stream: int = 0
    antithetic: bool = False
    logS: Optional[np.ndarray] = None
    logX: Optional[np.ndarray] = None
    logZ: Optional[np.ndarray] = None
    n_clamped: int = 0

    @property
    def n_paths(self) -> int:
        return self.dW1.shape[1]

    @property
    def n_steps(self) -> int:
        return self.dW1.shape[0]

    @property
    def tau(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def dt(self) -> float:
        return self.tau / self.n_steps

    @property
    def X(self):
        return None if self.logX is None else np.exp(self.logX)

    @property
    def Z(self):
        return None if self.logZ is None else np.exp(self.logZ)

    @property
    def S(self):
        return None if self.logS is None else np.exp(self.logS)

    def replace(self, **kw) -> "PathBundle":
        return dataclasses.replace(self, **kw)


def simulate_factor(model: MarketModel, y0: float, cfg: SimulationConfig, stream: int = 0,
                    with_price: bool = False, s0: float = 1.0) -> PathBundle:
    """Euler-Maruyama paths of ``dY = b dt + beta (rho dW1 + sqrt(1-rho^2) dW2)``.

    With ``with_price`` the log price ``d log S = (mu - sigma^2/2) dt + sigma dW1``
    is simulated on the same increments.  ``y0`` may be a per-path array
    (used when periods are chained).
    """
    dW1, dW2 = brownian_increments(cfg, stream)
    K, P = dW1.shape
    dt = cfg.dt
    rho = model.rho
    rbar = math.sqrt(max(0.0, 1.0 - rho * rho))
    Y = np.empty((K + 1, P))
    Y[0] = y0
    logS = None
    if with_price:
        logS = np.empty((K + 1, P))
        logS[0] = math.log(s0)
    for k in range(K):
        yk = Y[k]
        bet = model.beta(yk)
        Y[k + 1] = yk + model.b(yk) * dt + bet * (rho * dW1[k] + rbar * dW2[k])
        if with_price:
            sig = model.sigma(yk)
            logS[k + 1] = logS[k] + (model.mu(yk) - 0.5 * sig * sig) * dt + sig * dW1[k]
    t = np.linspace(0.0, cfg.tau, K + 1)
    y0 = float(y0) if np.ndim(y0) == 0 else np.asarray(y0, dtype=float)
    return PathBundle(t=t, dW1=dW1, dW2=dW2, Y=Y, y0=y0, seed=int(cfg.seed), stream=int(stream),
                      antithetic=bool(cfg.antithetic), logS=logS)


# ---------------------------------------------------------------------------
# feedback policies
# ---------------------------------------------------------------------------

POLICY_KINDS = ("zero", "cash", "merton-log", "merton-power", "table")


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Proportion ``pi(t, y)`` of wealth held in the risky asset.

    Named closed forms: ``zero``/``cash`` (``pi = 0``), ``merton-log``
    (``theta / sigma``) and ``merton-power`` (``theta / ((1 - alpha) sigma)``),
    each optionally multiplied by ``scale``; ``table`` is bilinear on
    (time x factor) knots.  Values are clamped to ``|pi| <= pi_max``.
    """

    kind: str
    alpha: Optional[float] = None
    scale: float = 1.0
    times: Optional[np.ndarray] = None
    ys: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    pi_max: float = 20.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise UsageError(f"unknown policy kind {self.kind!r}")
        if self.kind == "merton-power" and (self.alpha is None or not self.alpha < 1 or self.alpha == 0):
            raise UsageError("merton-power needs alpha in (-inf, 0) U (0, 1)")
        if self.kind == "table":
            v = np.asarray(self.values, dtype=float)
            t = np.asarray(self.times, dtype=float)
            y = np.asarray(self.ys, dtype=float)
            if v.shape != (t.size, y.size):
                raise UsageError("policy table values must have shape (len(times), len(ys))")
            object.__setattr__(self, "values", v)
            object.__setattr__(self, "times", t)
            object.__setattr__(self, "ys", y)

    @classmethod
    def zero(cls, pi_max: float = 20.0):
        return cls("zero", pi_max=pi_max)

    @classmethod
    def cash(cls, pi_max: float = 20.0):
        return cls("cash", pi_max=pi_max)

    @classmethod
    def merton_log(cls, scale: float = 1.0, pi_max: float = 20.0):
        return cls("merton-log", scale=scale, pi_max=pi_max)

    @classmethod
    def merton_power(cls, alpha: float, scale: float = 1.0, pi_max: float = 20.0):
        return cls("merton-power", alpha=alpha, scale=scale, pi_max=pi_max)

    @classmethod
    def table(cls, times, ys, values, pi_max: float = 20.0):
        return cls("table", times=times, ys=ys, values=values, pi_max=pi_max)

    def raw(self, t: float, y, model: MarketModel):
        """Unclamped policy values."""
        y = np.asarray(y, dtype=float)
        if self.kind in ("zero", "cash"):
            return np.zeros(y.shape)
        if self.kind == "table":
            return bilinear(self.times, self.ys, self.values, t, y)
        th = theta(model, y) / model.sigma(y)
        if self.kind == "merton-power":
            th = th / (1.0 - self.alpha)
        return self.scale * th

    def __call__(self, t: float, y, model: MarketModel):
        return np.clip(self.raw(t, y, model), -self.pi_max, self.pi_max)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "pi_max": self.pi_max}
        if self.kind in ("merton-log", "merton-power"):
            d["scale"] = self.scale
        if self.kind == "merton-power":
            d["alpha"] = self.alpha
        if self.kind == "table":
            d.update(times=self.times.tolist(), ys=self.ys.tolist(), values=self.values.tolist())
        return d


def simulate_wealth(model: MarketModel, policy: Callable, x0: float, bundle: PathBundle) -> PathBundle:
    """Log-Euler wealth ``d log X = (r + pi (mu - r) - pi^2 sigma^2 / 2) dt + pi sigma dW1``.

    Policy values beyond the box bound are clamped; the clamp count is stored
    on the returned bundle and reported through a warning.
    """
    if not x0 > 0:
        raise UsageError("initial wealth must be positive")
    K, P = bundle.dW1.shape
    dt = bundle.dt
    pi_max = getattr(policy, "pi_max", math.inf)
    raw = getattr(policy, "raw", policy)
    logX = np.empty((K + 1, P))
    logX[0] = math.log(x0)
    clamped = 0
    for k in range(K):
        yk = bundle.Y[k]
        pi = np.asarray(raw(bundle.t[k], yk, model), dtype=float)
        over = np.abs(pi) > pi_max
        if over.any():
            clamped += int(over.sum())
            pi = np.clip(pi, -pi_max, pi_max)
        sig = model.sigma(yk)
        ps = pi * sig
        logX[k + 1] = logX[k] + (model.r + pi * (model.mu(yk) - model.r) - 0.5 * ps * ps) * dt + ps * bundle.dW1[k]
    if clamped:
        warnings.warn(f"policy exceeded the box bound {pi_max:g} at {clamped} path-steps; clamped",
                      RuntimeWarning, stacklevel=2)
    return bundle.replace(logX=logX, n_clamped=bundle.n_clamped + clamped)


def simulate_dual_density(model: MarketModel, eta, bundle: PathBundle) -> PathBundle:
    """``log Z`` for ``Z = exp(-int theta dW1 + int eta dW2 - 1/2 int (theta^2 + eta^2) ds)``.

    ``eta`` is a callable ``eta(t, y)`` (e.g. a :class:`DualControl`) or ``None`` for zero.
    """
    K, P = bundle.dW1.shape
    dt = bundle.dt
    logZ = np.empty((K + 1, P))
    logZ[0] = 0.0
    for k in range(K):
        yk = bundle.Y[k]
        th = theta(model, yk)
        inc = -th * bundle.dW1[k] - 0.5 * th * th * dt
        if eta is not None:
            e = np.asarray(eta(bundle.t[k], yk), dtype=float)
            inc = inc + e * bundle.dW2[k] - 0.5 * e * e * dt
        logZ[k + 1] = logZ[k] + inc
    return bundle.replace(logZ=logZ)


def doleans_exponential(increments, integrand, dt: float) -> np.ndarray:
    """Path values of ``exp(int eta dW - 1/2 int eta^2 ds)`` with a leading row of ones.

    ``increments`` has shape (K, P); ``integrand`` is broadcastable to it and
    holds the left-point values of ``eta``.
    """
    dW = np.asarray(increments, dtype=float)
    e = np.broadcast_to(np.asarray(integrand, dtype=float), dW.shape)
    inc = e * dW - 0.5 * e * e * dt
    out = np.zeros((dW.shape[0] + 1,) + dW.shape[1:])
    np.cumsum(inc, axis=0, out=out[1:])
    return np.exp(out)


def theta_along(model: MarketModel, bundle: PathBundle) -> np.ndarray:
    """``theta(Y_k)`` at step-start points, shape (K, P)."""
    return theta(model, bundle.Y[:-1])


# ---------------------------------------------------------------------------
# debugging dumps
# ---------------------------------------------------------------------------

_MAGIC = b"PERI"
_VERSION = 1
_HEADER = struct.Struct("<4sHQIIB3xdd")
_FIELDS = ("logS", "logX", "logZ")


def dump_bundle(bundle: PathBundle, path) -> None:
    """Binary dump: header (magic, version, seed, steps, paths, flags, tau, y0), then float64 arrays."""
    flags = sum(1 << i for i, f in enumerate(_FIELDS) if getattr(bundle, f) is not None)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, bundle.seed & _MASK64, bundle.n_steps, bundle.n_paths,
                              flags, bundle.tau, float(bundle.y0) if np.ndim(bundle.y0) == 0 else math.nan))
        for arr in (bundle.dW1, bundle.dW2, bundle.Y):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for f in _FIELDS:
            a = getattr(bundle, f)
            if a is not None:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_bundle(path) -> PathBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, ver, seed, K, P, flags, tau, y0 = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise UsageError("not a path-bundle dump (bad magic)")
    if ver != _VERSION:
        raise UsageError(f"unsupported dump version {ver}")
    off = _HEADER.size

    def take(rows):
        nonlocal off
        n = rows * P
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(rows, P).copy()
        off += n * 8
        return a

    dW1, dW2, Y = take(K), take(K), take(K + 1)
    extra = {f: (take(K + 1) if flags & (1 << i) else None) for i, f in enumerate(_FIELDS)}
    return PathBundle(t=np.linspace(0.0, tau, K + 1), dW1=dW1, dW2=dW2, Y=Y, y0=y0, seed=int(seed), **extra)


def export_terminal_csv(bundle: PathBundle, path) -> None:
    """Per-path terminal values: path index, Y, and S, X, Z when present."""
    cols = [("path", np.arange(bundle.n_paths)), ("Y_T", bundle.Y[-1])]
    for name, f in (("S_T", "logS"), ("X_T", "logX"), ("Z_T", "logZ")):
        a = getattr(bundle, f)
        if a is not None:
            cols.append((name, np.exp(a[-1])))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(c[0] for c in cols) + "\n")
        for i in range(bundle.n_paths):
            fh.write(",".join(str(int(c[1][i])) if c[0] == "path" else repr(float(c[1][i])) for c in cols) + "\n")
