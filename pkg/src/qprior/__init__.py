"""Fault-likelihood driven test prioritization with QUBO selection."""

__version__ = "0.1.0"
