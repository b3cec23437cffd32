"""Implicit sampling and its applications.

Implicit sampling is an importance-sampling scheme that locates the mode of
a target density exp(-F) by minimizing F, then maps a Gaussian reference
variable into the high-probability region by solving F(x) - min F = xi'xi/2.
This package provides the core sampler plus three applications built on it:
path integral stochastic optimal control, Monte Carlo localization on a
known landmark map, and online landmark SLAM, together with a seeded
benchmark harness.
"""

__version__ = "0.1.0"
