"""Density flows, their Frechet derivatives and the value function of a
mean-field SDE driven by a nonlocal Fokker-Planck equation."""

__version__ = "0.1.0"
