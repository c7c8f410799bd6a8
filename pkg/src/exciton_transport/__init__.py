"""Coherent excitation transfer across random N-site dipole networks."""

__version__ = "0.1.0"
