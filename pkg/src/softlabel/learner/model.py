"""Fully connected ReLU network with a SoftMax output and manual backprop.

Model file layout (little-endian):

    8 bytes   magic b"SOFTMLP\\0"
    uint32    format version (1)
    uint32    number of layer sizes L, then L x uint32 sizes
    uint32    descriptor length D, then D bytes of UTF-8 JSON
              {"extractor": {...}, "meta": {...}}
    input mean then input scale (sizes[0] float64 each)
    per layer weights (in x out, row-major float64) then biases (out, float64)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import FeatureExtractor

MAGIC = b"SOFTMLP\x00"
VERSION = 1
PRED_FLOOR = 1e-12


class ModelFormatError(ValueError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """``-sum_j t_j ln p_j`` along the last axis, ``p`` clamped to [1e-12, 1]."""
    p = np.clip(pred, PRED_FLOOR, 1.0)
    return -(np.asarray(target) * np.log(p)).sum(axis=-1)


@dataclass
class SoftmaxClassifier:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    extractor: FeatureExtractor = field(default_factory=FeatureExtractor)
    # inputs are standardized as (x - mean) / scale before the first layer
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.sizes[0]
        self.mean = np.zeros(n) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.scale = np.ones(n) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if self.mean.shape != (n,) or self.scale.shape != (n,) or np.any(self.scale <= 0):
            raise ValueError("input mean/scale must have one positive entry per feature")

    @classmethod
    def initialize(
        cls, sizes: Sequence[int], rng: np.random.Generator, extractor: FeatureExtractor | None = None
    ) -> "SoftmaxClassifier":
        """Glorot-uniform hidden layers, zero biases, zero output layer."""
        sizes = tuple(int(s) for s in sizes)
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == len(sizes) - 2:
                w = np.zeros((fan_in, fan_out))
            else:
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases, extractor or FeatureExtractor())

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "SoftmaxClassifier":
        return SoftmaxClassifier(
            self.sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.extractor,
            self.mean.copy(),
            self.scale.copy(),
            dict(self.meta),
        )

    def forward(self, x: np.ndarray, keep: bool = False):
        h = (x - self.mean) / self.scale
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        probs = softmax(h)
        return (probs, acts) if keep else probs

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def loss_and_grads(self, x: np.ndarray, target: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy over rows and its gradient for every parameter."""
        probs, acts = self.forward(x, keep=True)
        n = x.shape[0]
        loss = float(cross_entropy(probs, target).mean())
        # d/dz of mean CE through SoftMax (targets sum to one)
        delta = (probs - target) / n
        grads: list[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            gw = acts[i].T @ delta
            gb = delta.sum(axis=0)
            grads = [gw, gb] + grads
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return loss, grads

    # -- persistence ------------------------------------------------------
    def to_bytes(self) -> bytes:
        doc = {"extractor": self.extractor.descriptor(), "meta": self.meta}
        desc = json.dumps(doc, sort_keys=True).encode("utf-8")
        parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(self.sizes))]
        parts.append(struct.pack(f"<{len(self.sizes)}I", *self.sizes))
        parts.append(struct.pack("<I", len(desc)))
        parts.append(desc)
        parts.append(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(self.scale, dtype="<f8").tobytes())
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SoftmaxClassifier":
        if buf[:8] != MAGIC:
            raise ModelFormatError("not a softlabel model file")
        try:
            return cls._parse(buf)
        except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"truncated or corrupt model file: {exc}") from exc

    @classmethod
    def _parse(cls, buf: bytes) -> "SoftmaxClassifier":
        off = 8
        (version,) = struct.unpack_from("<I", buf, off)
        off += 4
        if version != VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        sizes = struct.unpack_from(f"<{n}I", buf, off)
        off += 4 * n
        (dlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        doc = json.loads(buf[off : off + dlen].decode("utf-8"))
        extractor = FeatureExtractor.from_descriptor(doc["extractor"])
        off += dlen
        norm = np.frombuffer(buf, dtype="<f8", count=2 * sizes[0], offset=off).astype(np.float64)
        off += 16 * sizes[0]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = np.frombuffer(buf, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
            off += 8 * fan_in * fan_out
            b = np.frombuffer(buf, dtype="<f8", count=fan_out, offset=off)
            off += 8 * fan_out
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        if off != len(buf):
            raise ModelFormatError("trailing bytes in model file")
        return cls(
            tuple(sizes), weights, biases, extractor, norm[: sizes[0]], norm[sizes[0] :], doc.get("meta", {})
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SoftmaxClassifier":
        return cls.from_bytes(Path(path).read_bytes())


GradFn = Callable[[SoftmaxClassifier, np.ndarray, np.ndarray], tuple[float, list[np.ndarray]]]


def _relu_pattern(model: SoftmaxClassifier, x: np.ndarray) -> np.ndarray:
    """Sign pattern of every hidden pre-activation for the batch ``x``."""
    _, acts = model.forward(x, keep=True)
    return np.concatenate([(a > 0).ravel() for a in acts[1:-1]]) if len(acts) > 2 else np.zeros(0, bool)


def gradient_check(
    model: SoftmaxClassifier,
    x: np.ndarray,
    target: np.ndarray,
    n_params: int = 100,
    step: float = 1e-4,
    seed: int = 0,
    grad_fn: GradFn | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``n_params`` randomly chosen scalar parameters.  A parameter whose
    +/- ``step`` stencil flips the sign of any hidden ReLU input straddles a
    kink, where the central difference is not a derivative estimate; such
    parameters are skipped and the next random parameter is drawn instead.
    ``grad_fn`` replaces the analytic gradient (used for fault injection).
    """
    grad_fn = grad_fn or (lambda m, xx, tt: m.loss_and_grads(xx, tt))
    _, grads = grad_fn(model, x, target)
    params = model.params
    sizes = np.array([p.size for p in params])
    bounds = np.cumsum(sizes)
    order = np.random.default_rng(seed).permutation(int(sizes.sum()))
    base = _relu_pattern(model, x)
    worst, checked = 0.0, 0
    for flat in order:
        if checked >= n_params:
            break
        k = int(np.searchsorted(bounds, flat, side="right"))
        local = flat - (bounds[k - 1] if k else 0)
        p = params[k].reshape(-1)
        orig = p[local]
        p[local] = orig + step
        up = float(cross_entropy(model.forward(x), target).mean())
        kink = not np.array_equal(_relu_pattern(model, x), base)
        p[local] = orig - step
        down = float(cross_entropy(model.forward(x), target).mean())
        kink = kink or not np.array_equal(_relu_pattern(model, x), base)
        p[local] = orig
        if kink:
            continue
        checked += 1
        numeric = (up - down) / (2 * step)
        analytic = float(grads[k].reshape(-1)[local])
        denom = max(abs(numeric), abs(analytic), 1e-7)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
