"""Simulation and verification tools for the Depauw divergence-free field."""

__version__ = "0.1.0"
