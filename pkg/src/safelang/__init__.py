"""Constrained RL with natural-language constraints and predicted costs."""

__version__ = "0.1.0"
