"""Branching Brownian motion with singular branching rate: eigenvalue solvers, simulators and estimators."""

__version__ = "0.1.0"
