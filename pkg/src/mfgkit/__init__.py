"""Solver and simulator for discrete-time mean-field games with discounted cost."""

__version__ = "0.1.0"
