"""Equivariant graph hierarchy networks for multi-body dynamics."""

__version__ = "0.1.0"
