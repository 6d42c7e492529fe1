"""Unsupervised stochastic state estimation and weak-constraint 4D-Var on
the Lorenz-96 system."""

__version__ = "0.1.0"
