"""Adversarial attribute-level augmentation for zero-shot learning, in plain numpy."""

__version__ = "0.1.0"
