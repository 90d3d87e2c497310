"""Adversarial item promotion against visually-aware recommenders, at desk scale."""

__version__ = "0.1.0"
