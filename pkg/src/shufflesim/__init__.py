"""Deterministic model of a disaggregated shuffle service on a simulated cluster."""

__version__ = "0.1.0"
