"""Bilinear (time x factor) tables and their hat-basis stencils along simulated paths.

Both dual controls ``eta(t, y)`` and feedback policies ``pi(t, y)`` are stored as
values on a tensor grid of knots.  The stencil precomputes, for every path and
time step, the interpolation weights so that evaluating a table and
back-propagating a path-wise gradient onto its knot values are both a few
vectorized gathers and scatter-adds.
"""
from __future__ import annotations

import numpy as np


def bilinear(times, ys, values, t: float, y):
    """Evaluate a (time x factor) table at scalar ``t`` and array ``y`` with clamping."""
    times = np.asarray(times, dtype=float)
    vals = np.asarray(values, dtype=float)
    if times.size == 1:
        row = vals[0]
    else:
        row = np.array([np.interp(t, times, vals[:, j]) for j in range(vals.shape[1])])
    if row.size == 1:
        return np.full(np.shape(y), row[0])
    return np.interp(np.asarray(y, dtype=float), ys, row)


def local_knots(y0: float, Y: np.ndarray, n: int, width: float = 3.0) -> np.ndarray:
    """Factor knots ``y0 + linspace(-w, w, n)`` with ``w`` = ``width`` x spread of ``Y(tau) - y0``."""
    if n <= 1:
        return np.array([float(y0)])
    sd = float(np.std(Y[-1] - y0))
    if not sd > 1e-12:
        return np.array([float(y0)])
    w = width * sd
    return y0 + np.linspace(-w, w, n)


def time_knots(tau: float, n: int) -> np.ndarray:
    if n <= 1:
        return np.array([0.0])
    return np.linspace(0.0, tau, n)


class TensorStencil:
    """Interpolation weights of a knot table sampled at step-start points of paths.

    Parameters
    ----------
    times, ys : knot coordinates (strictly increasing)
    t_steps : (K,) left endpoints of the time steps
    Y_steps : (K, P) factor values at the left endpoints
    """

    def __init__(self, times, ys, t_steps, Y_steps):
        self.times = np.asarray(times, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        t_steps = np.asarray(t_steps, dtype=float)
        K, P = Y_steps.shape
        nt, ny = self.times.size, self.ys.size
        self.shape = (nt, ny)
        self.K, self.P = K, P
        eye = np.eye(nt)
        if nt == 1:
            self.Wt = np.ones((K, 1))
        else:
            self.Wt = np.stack([np.interp(t_steps, self.times, eye[a]) for a in range(nt)], axis=1)
        if ny == 1:
            self.iy = np.zeros((K, P), dtype=np.intp)
            self.wy = np.zeros((K, P))
        else:
            iy = np.searchsorted(self.ys, Y_steps, side="right") - 1
            iy = np.clip(iy, 0, ny - 2)
            lo = self.ys[iy]
            self.wy = np.clip((Y_steps - lo) / (self.ys[iy + 1] - lo), 0.0, 1.0)
            self.iy = iy
        # flat indices into a (K, ny + 1) row table; the extra column pads ny == 1
        base = (np.arange(K) * (ny + 1))[:, None]
        self._flat_lo = (base + self.iy).ravel()
        self._flat_hi = self._flat_lo + 1

    def evaluate(self, coef) -> np.ndarray:
        """Table values along paths, shape (K, P)."""
        c = np.asarray(coef, dtype=float).reshape(self.shape)
        rows = self.Wt @ c
        rows = np.concatenate([rows, rows[:, -1:]], axis=1).ravel()
        lo = rows[self._flat_lo].reshape(self.K, self.P)
        hi = rows[self._flat_hi].reshape(self.K, self.P)
        return lo + self.wy * (hi - lo)

    def adjoint(self, g) -> np.ndarray:
        """Gradient of ``sum(g * evaluate(c))`` with respect to ``c``."""
        g = np.asarray(g, dtype=float)
        ny = self.shape[1]
        n = self.K * (ny + 1)
        gw = g * self.wy
        m = (np.bincount(self._flat_lo, weights=(g - gw).ravel(), minlength=n)
             + np.bincount(self._flat_hi, weights=gw.ravel(), minlength=n))
        m = m.reshape(self.K, ny + 1)[:, :ny]
        return self.Wt.T @ m
