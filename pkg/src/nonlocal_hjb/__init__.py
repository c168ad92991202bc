"""Solvers for nonlocal parabolic systems arising from time-inconsistent games."""

__version__ = "0.1.0"
