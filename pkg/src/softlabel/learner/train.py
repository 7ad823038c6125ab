"""Patch sampling, SGD training and whole-volume inference."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from ..stack import CHANNELS, N_CHANNELS, ProbabilityStack
from ..volume import GeometryError, Volume
from .features import FeatureExtractor, PreparedInputs
from .model import SoftmaxClassifier, cross_entropy

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 32768


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    epochs: int = 30
    batch_size: int = 4
    patch_size: tuple[int, int, int] = (128, 128, 64)
    voxels_per_patch: int = 4096
    patches_per_case: int = 4
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.voxels_per_patch < 1:
            raise ValueError("learning_rate, batch_size and voxels_per_patch must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.epochs < 0 or self.patches_per_case < 1:
            raise ValueError("weight_decay and epochs must be non-negative, patches_per_case positive")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError("patch_size must be three positive ints")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingCase:
    inputs: PreparedInputs
    targets: np.ndarray  # (n_voxels, 13), C-order voxel index

    @classmethod
    def from_volumes(
        cls,
        adc_scaled: Volume,
        s0_scaled: Volume,
        target: ProbabilityStack,
        extractor: FeatureExtractor | None = None,
    ) -> "TrainingCase":
        if not target.grid.same_as(adc_scaled.grid):
            raise GeometryError("target stack and inputs must share a grid")
        prepared = (extractor or FeatureExtractor()).prepare(adc_scaled, s0_scaled)
        return cls(prepared, np.ascontiguousarray(target.data, dtype=np.float64).reshape(-1, N_CHANNELS))


def feature_moments(case: TrainingCase) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and mean square over every voxel of a case."""
    idx = case.inputs.all_indices()
    n_feat = case.inputs.extractor.n_features
    s1 = np.zeros(n_feat)
    s2 = np.zeros(n_feat)
    for start in range(0, idx.shape[0], PREDICT_CHUNK):
        f = case.inputs.features(idx[start : start + PREDICT_CHUNK])
        s1 += f.sum(axis=0)
        s2 += (f * f).sum(axis=0)
    return s1 / idx.shape[0], s2 / idx.shape[0]


def standardization(dataset: Sequence[TrainingCase]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and scale averaged over cases; constant features keep scale 1."""
    moments = [feature_moments(c) for c in dataset]
    mean = np.mean([m[0] for m in moments], axis=0)
    var = np.mean([m[1] for m in moments], axis=0) - mean**2
    std = np.sqrt(np.maximum(var, 0.0))
    return mean, np.where(std > 1e-6, std, 1.0)


@dataclass
class Patch:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]
    indices: np.ndarray
    features: np.ndarray
    targets: np.ndarray


def sample_patches(case: TrainingCase, cfg: TrainConfig, rng: np.random.Generator, n: int = 1) -> list[Patch]:
    """Draw ``n`` patches with uniform in-bounds origins and uniform voxel subsamples."""
    dims = np.asarray(case.inputs.dims)
    size = np.minimum(np.asarray(cfg.patch_size), dims)
    out = []
    for _ in range(n):
        origin = np.array([rng.integers(0, d - s + 1) for d, s in zip(dims, size)])
        n_patch = int(np.prod(size))
        k = min(cfg.voxels_per_patch, n_patch)
        local = np.sort(rng.choice(n_patch, size=k, replace=False))
        idx = np.stack(np.unravel_index(local, tuple(size)), axis=1) + origin
        flat = np.ravel_multi_index(idx.T, tuple(dims))
        out.append(
            Patch(
                tuple(int(o) for o in origin),
                tuple(int(s) for s in size),
                idx,
                case.inputs.features(idx),
                case.targets[flat],
            )
        )
    return out


@dataclass
class TrainResult:
    model: SoftmaxClassifier
    history: list[dict] = field(default_factory=list)


def _stack_batch(patches: Sequence[Patch]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.concatenate([p.features for p in patches]),
        np.concatenate([p.targets for p in patches]),
    )


def train(dataset: Sequence[TrainingCase], cfg: TrainConfig | None = None) -> TrainResult:
    """Minibatch SGD with momentum and decoupled weight decay.

    Independent random streams drive initialization, case order, patch
    draws and the fixed probe batch, so repeating a case in the dataset is
    equivalent to training on it for proportionally more epochs.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise TrainingError("training needs at least one case")
    extractor = dataset[0].inputs.extractor
    init_rng, order_rng, patch_rng, probe_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4)
    )
    sizes = (extractor.n_features, *cfg.hidden, N_CHANNELS)
    model = SoftmaxClassifier.initialize(sizes, init_rng, extractor)
    model.mean, model.scale = standardization(dataset)
    px, pt = _stack_batch([p for case in dataset[:4] for p in sample_patches(case, cfg, probe_rng)])

    params = model.params
    velocity = [np.zeros_like(p) for p in params]
    n_steps = math.ceil(len(dataset) * cfg.patches_per_case / cfg.batch_size)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(np.repeat(np.arange(len(dataset)), cfg.patches_per_case))
        losses = []
        for step in range(n_steps):
            picks = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            x, t = _stack_batch([sample_patches(dataset[c], cfg, patch_rng)[0] for c in picks])
            loss, grads = model.loss_and_grads(x, t)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}; try a lower learning rate"
                )
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v += g
                p -= cfg.learning_rate * (v + cfg.weight_decay * p)
            losses.append(loss)
        probe = float(cross_entropy(model.forward(px), pt).mean())
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "probe_loss": probe})
        logger.info("epoch %d: train %.5f probe %.5f", epoch, history[-1]["train_loss"], probe)
    return TrainResult(model, history)


def predict(adc_scaled: Volume, s0_scaled: Volume, model: SoftmaxClassifier) -> ProbabilityStack:
    """Per-voxel SoftMax over the whole volume."""
    if not adc_scaled.grid.same_as(s0_scaled.grid):
        raise GeometryError("ADC and S0 must share a grid")
    t0 = time.perf_counter()
    prepared = model.extractor.prepare(adc_scaled, s0_scaled)
    idx = prepared.all_indices()
    out = np.empty((idx.shape[0], N_CHANNELS))
    for start in range(0, idx.shape[0], PREDICT_CHUNK):
        sl = slice(start, start + PREDICT_CHUNK)
        out[sl] = model.predict_proba(prepared.features(idx[sl]))
    logger.info("predict: %d voxels in %.2fs", idx.shape[0], time.perf_counter() - t0)
    return ProbabilityStack(adc_scaled.grid, out.reshape(adc_scaled.grid.dims + (N_CHANNELS,)), CHANNELS)
