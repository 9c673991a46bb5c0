"""Solver and verification toolkit for stochastic control problems with delay in the control."""

__version__ = "0.1.0"
