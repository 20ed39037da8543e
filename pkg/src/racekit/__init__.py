"""Differentiable drone-racing policy learning with gate-induced attractive vector fields."""

__version__ = "0.1.0"
