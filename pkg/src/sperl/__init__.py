"""Equilibrium reinforcement learning for finite-horizon time-inconsistent control."""
__version__ = "0.1.0"
