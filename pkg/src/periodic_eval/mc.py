"""Monte Carlo estimates carrying their standard errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error.

    ``se == 0`` marks an exact (zero-variance) number.
    """

    mean: float
    se: float
    n: int = 1

    @property
    def exact(self) -> bool:
        return self.se == 0.0

    def within(self, target: float, k: float = 3.0, atol: float = 1e-12) -> bool:
        """True when ``|mean - target| <= k * se + atol``."""
        return abs(self.mean - target) <= k * self.se + atol

    def shifted(self, c: float) -> "Estimate":
        return Estimate(self.mean + c, self.se, self.n)

    def scaled(self, c: float) -> "Estimate":
        return Estimate(self.mean * c, self.se * abs(c), self.n)

    def to_dict(self) -> dict:
        return {"value": self.mean, "se": self.se, "n": self.n, "exact": self.exact}


def estimate(samples, antithetic: bool = False) -> Estimate:
    """Mean and standard error of per-path samples.

    With ``antithetic=True`` paths ``i`` and ``i + n/2`` are partners and the
    standard error is computed from the pair averages.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    if antithetic:
        half = x.size // 2
        x = 0.5 * (x[:half] + x[half:2 * half])
    n = x.size
    mean = float(x.mean())
    if n < 2:
        return Estimate(mean, 0.0, n)
    sd = float(x.std(ddof=1))
    # treat round-off level spread as exact
    if sd <= 1e-14 * max(1.0, abs(mean)):
        sd = 0.0
    return Estimate(mean, sd / math.sqrt(n), n)


def combined_se(*ses: float) -> float:
    """Standard error of a difference of independent (or conservatively paired) estimates."""
    return math.sqrt(sum(s * s for s in ses))
