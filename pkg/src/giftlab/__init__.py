"""Gibbs-initialised fine-tuning experiments on tiny policies and synthetic tasks."""

__version__ = "0.1.0"
