"""Adversarial attacks on time-frequency-image radar classifiers."""

__version__ = "0.1.0"
