"""Discrete-event cluster substrate."""
