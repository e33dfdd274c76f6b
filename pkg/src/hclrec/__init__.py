"""Hierarchical contrastive learning with multi-level augmentation for sequential recommendation."""

__version__ = "0.1.0"
