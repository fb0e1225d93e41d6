"""Locational marginal emissions by implicit differentiation of DC dispatch."""

__version__ = "0.1.0"
