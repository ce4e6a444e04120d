"""Simulation and verification toolkit for interacting SDEs on the integer
lattice: truncated systems with multiplicative noise, an alternating
splitting scheme, localized Picard iterates, Feynman-Kac moment oracles,
and a Monte Carlo harness that checks the closed-form bounds at desk scale.
"""

__version__ = "0.1.0"
