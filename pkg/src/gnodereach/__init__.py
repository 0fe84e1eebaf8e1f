"""Reachability analysis for general neural ODEs (mixed FC and neural-ODE layers)."""

__version__ = "0.1.0"
