"""Federated causal structure learning with a shared differentiable graph proxy."""

__version__ = "0.1.0"
