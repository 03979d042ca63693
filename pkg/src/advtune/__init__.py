"""Adversarial fine-tuning with a dynamically regulated adversary."""

__version__ = "0.1.0"
