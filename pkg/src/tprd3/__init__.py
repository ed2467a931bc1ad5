"""Discrete dictionary decomposition for fast-weight tensor-product memories."""

__version__ = "0.1.0"
