"""Soft-label region probability maps for whole-body diffusion MRI."""

__version__ = "0.1.0"
