"""Portfolio optimization under periodic ratio-type evaluation.

Dual Monte Carlo solver for the one-period problems, contraction iteration
for the continuation function ``A*``, and multi-period verification.
"""

__version__ = "0.1.0"
