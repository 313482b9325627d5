"""Equivariant-embedding data augmentation for visual-navigation imitation learning."""

__version__ = "0.1.0"
