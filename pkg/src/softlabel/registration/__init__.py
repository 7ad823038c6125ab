"""Affine (Nelder-Mead) and diffeomorphic demons registration on MSE."""
from .affine import RegistrationError, mse_metric, register_affine
from .config import AffineConfig, DemonsConfig, RegistrationConfig
from .demons import jacobian_determinant, register_demons
from .transforms import (
    AffineTransform,
    DeformationField,
    TransformChain,
    TransformError,
    apply_transform,
    load_initial_alignment,
)

__all__ = [
    "AffineConfig",
    "AffineTransform",
    "DeformationField",
    "DemonsConfig",
    "RegistrationConfig",
    "RegistrationError",
    "TransformChain",
    "TransformError",
    "apply_transform",
    "jacobian_determinant",
    "load_initial_alignment",
    "mse_metric",
    "register_affine",
    "register_demons",
]
