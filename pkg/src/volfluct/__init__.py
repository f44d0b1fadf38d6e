"""Small-noise stochastic Volterra laboratory.

Simulates stochastic Volterra equations with small noise, their
deterministic and Gaussian limits, and the second-order Malliavin
correction, and measures empirical convergence rates against the
predicted ones.
"""

__version__ = "0.1.0"
