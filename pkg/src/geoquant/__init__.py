"""Symmetry-preserving quantization toolkit for rotation-equivariant force fields."""

__version__ = "0.1.0"
