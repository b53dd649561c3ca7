"""Pairwise learning with structured anti-symmetric ReLU networks."""

__version__ = "0.1.0"
