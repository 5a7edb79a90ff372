"""Continuation solver and verification suite for coupled forward-backward
doubly stochastic differential equations with Poisson jumps."""

__version__ = "0.1.0"
