"""Per-voxel multiscale-context MLP trained on soft-label stacks."""
from .features import FeatureExtractor, PreparedInputs
from .model import ModelFormatError, SoftmaxClassifier, cross_entropy, gradient_check, softmax
from .train import Patch, TrainConfig, TrainingCase, TrainingError, TrainResult, predict, sample_patches, train

__all__ = [
    "FeatureExtractor",
    "ModelFormatError",
    "Patch",
    "PreparedInputs",
    "SoftmaxClassifier",
    "TrainConfig",
    "TrainResult",
    "TrainingCase",
    "TrainingError",
    "cross_entropy",
    "gradient_check",
    "predict",
    "sample_patches",
    "softmax",
    "train",
]
