"""Parallel off-policy Q-learning over vectorized simulators."""

__version__ = "0.1.0"
