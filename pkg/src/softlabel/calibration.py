"""Reliability curves, isotonic (PAVA) one-vs-all calibration and log-loss."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .stack import ProbabilityStack
from .volume import GeometryError, Volume

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

logger = logging.getLogger(__name__)

N_BINS = 20
LOG_CLAMP = 1e-12


class CalibrationError(ValueError):
    pass


def _values(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Volume) else a, dtype=np.float64).ravel()


def _binary(a) -> np.ndarray:
    t = _values(a)
    if not np.all((t == 0) | (t == 1)):
        raise CalibrationError("truth must be binary")
    return t


# -- reliability -----------------------------------------------------------
@dataclass(frozen=True)
class ReliabilityCurve:
    """Per-bin mean prediction ``x``, positive fraction ``y`` and ``counts``.

    Empty bins carry NaN in ``x`` and ``y``.
    """

    edges: np.ndarray
    x: np.ndarray
    y: np.ndarray
    counts: np.ndarray

    @property
    def occupied(self) -> np.ndarray:
        return self.counts > 0

    def miscalibration(self) -> float:
        """``sum count * (y - x)^2`` over occupied bins."""
        m = self.occupied
        return float(np.sum(self.counts[m] * (self.y[m] - self.x[m]) ** 2))


def bin_index(p: np.ndarray, bins: int = N_BINS) -> np.ndarray:
    """Right-closed bins ``(e_k, e_k+1]``; exactly 0 goes to the first bin."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    return np.clip(np.searchsorted(edges[1:], p, side="left"), 0, bins - 1)


def reliability_curve(pred, truth, bins: int = N_BINS) -> ReliabilityCurve:
    if isinstance(pred, Volume) and isinstance(truth, Volume) and not pred.grid.same_as(truth.grid):
        raise GeometryError("prediction and truth grids differ")
    p = _values(pred)
    t = _binary(truth)
    if p.shape != t.shape:
        raise CalibrationError("prediction and truth sizes differ")
    k = bin_index(p, bins)
    counts = np.bincount(k, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        x = np.bincount(k, weights=p, minlength=bins) / counts
        y = np.bincount(k, weights=t, minlength=bins) / counts
    return ReliabilityCurve(np.linspace(0.0, 1.0, bins + 1), x, y, counts)


def aggregate_curves(curves: Sequence[ReliabilityCurve]) -> dict[str, np.ndarray]:
    """Mean and standard deviation of per-case ``x`` and ``y`` over cases occupying each bin."""
    xs = np.array([c.x for c in curves])
    ys = np.array([c.y for c in curves])
    n = np.sum(~np.isnan(ys), axis=0)
    out = {"n_cases": n}
    with np.errstate(invalid="ignore", divide="ignore"):
        for name, arr in (("x", xs), ("y", ys)):
            filled = np.where(np.isnan(arr), 0.0, arr)
            mean = np.where(n > 0, filled.sum(0) / np.maximum(n, 1), np.nan)
            sq = np.where(np.isnan(arr), 0.0, (arr - mean) ** 2).sum(0)
            out[f"{name}_mean"] = mean
            out[f"{name}_std"] = np.where(n > 0, np.sqrt(sq / np.maximum(n, 1)), np.nan)
    return out


# -- PAVA ------------------------------------------------------------------
def _pava_kernel(y, w, out_val, out_w, out_len):
    """Pool adjacent violators; returns the number of blocks written."""
    nb = 0
    for i in range(y.shape[0]):
        out_val[nb] = y[i]
        out_w[nb] = w[i]
        out_len[nb] = 1
        nb += 1
        while nb > 1 and out_val[nb - 2] > out_val[nb - 1]:
            tw = out_w[nb - 2] + out_w[nb - 1]
            out_val[nb - 2] = (out_val[nb - 2] * out_w[nb - 2] + out_val[nb - 1] * out_w[nb - 1]) / tw
            out_w[nb - 2] = tw
            out_len[nb - 2] += out_len[nb - 1]
            nb -= 1
    return nb


_pava_compiled = njit(cache=True)(_pava_kernel) if njit is not None else _pava_kernel


def pava(y: Sequence[float], w: Sequence[float] | None = None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit to ``y`` (in the given order)."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.size == 0:
        raise CalibrationError("PAVA needs at least one value")
    w = np.ones_like(y) if w is None else np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != y.shape or np.any(w <= 0):
        raise CalibrationError("weights must be positive and match y")
    val = np.empty_like(y)
    wt = np.empty_like(y)
    ln = np.empty(y.shape, dtype=np.int64)
    nb = _pava_compiled(y, w, val, wt, ln)
    return np.repeat(val[:nb], ln[:nb])


@dataclass(frozen=True)
class IsotonicChannel:
    """Monotone step function: value ``values[k]`` on ``[lower[k], lower[k+1])``.

    Below ``lower[0]`` the first value applies.  ``identity`` channels pass
    inputs through unchanged.
    """

    lower: np.ndarray
    values: np.ndarray
    identity: bool = False

    @classmethod
    def make_identity(cls) -> "IsotonicChannel":
        return cls(np.empty(0), np.empty(0), True)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.identity:
            return x.copy()
        k = np.clip(np.searchsorted(self.lower, x, side="right") - 1, 0, self.values.size - 1)
        return self.values[k]

    def to_dict(self) -> dict:
        if self.identity:
            return {"kind": "identity"}
        return {
            "kind": "step",
            "breakpoints": [[float(a), float(b)] for a, b in zip(self.lower, self.values)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsotonicChannel":
        if d["kind"] == "identity":
            return cls.make_identity()
        bp = np.asarray(d["breakpoints"], dtype=np.float64).reshape(-1, 2)
        return cls(bp[:, 0], bp[:, 1])


def fit_isotonic_pava(x, y, w=None) -> IsotonicChannel:
    """Isotonic fit of ``y`` on sorted ``x``; equal ``x`` are pooled first."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0:
        raise CalibrationError("isotonic fit needs at least one point")
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64).ravel()
    if not (x.shape == y.shape == w.shape):
        raise CalibrationError("x, y and w must have equal length")
    if np.any(np.diff(x) < 0):
        raise CalibrationError("x must be sorted ascending")
    starts = np.flatnonzero(np.r_[True, np.diff(x) > 0])
    ux = x[starts]
    uw = np.add.reduceat(w, starts)
    uy = np.add.reduceat(w * y, starts) / uw
    fitted = pava(uy, uw)
    keep = np.r_[True, np.diff(fitted) != 0]
    return IsotonicChannel(ux[keep], fitted[keep])


# -- stacks ----------------------------------------------------------------
@dataclass(frozen=True)
class IsotonicModel:
    names: tuple[str, ...]
    channels: tuple[IsotonicChannel, ...]

    def to_text(self) -> str:
        doc = {
            "format": "softlabel-isotonic",
            "version": 1,
            "channels": [{"name": n, **c.to_dict()} for n, c in zip(self.names, self.channels)],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "IsotonicModel":
        doc = json.loads(text)
        if doc.get("format") != "softlabel-isotonic":
            raise CalibrationError("not an isotonic calibration model")
        chans = doc["channels"]
        return cls(tuple(c["name"] for c in chans), tuple(IsotonicChannel.from_dict(c) for c in chans))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "IsotonicModel":
        return cls.from_text(Path(path).read_text())


def calibrate_stack(stack: ProbabilityStack, model: IsotonicModel) -> ProbabilityStack:
    """Map each channel through its function, then renormalize per voxel.

    Voxels where every calibrated channel is 0 keep their input values.
    """
    if len(model.channels) != stack.data.shape[-1]:
        raise CalibrationError(
            f"model has {len(model.channels)} channels, stack has {stack.data.shape[-1]}"
        )
    data = np.asarray(stack.data, dtype=np.float64)
    out = np.stack([f(data[..., c]) for c, f in enumerate(model.channels)], axis=-1)
    out = np.clip(out, 0.0, 1.0)
    total = out.sum(axis=-1, keepdims=True)
    zero = total <= 0
    out = np.where(zero, data, out / np.where(zero, 1.0, total))
    return ProbabilityStack(stack.grid, out, stack.names)


def log_loss(pred, truth, clamp: float = LOG_CLAMP) -> float:
    p = np.clip(_values(pred), clamp, 1.0 - clamp)
    t = _values(truth)
    if p.shape != t.shape:
        raise CalibrationError("prediction and truth sizes differ")
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


@dataclass(frozen=True)
class CalibrationReport:
    names: tuple[str, ...]
    before: np.ndarray
    after: np.ndarray

    @property
    def relative_change(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return (self.after - self.before) / self.before

    def rows(self) -> list[dict]:
        return [
            {"channel": n, "log_loss_before": float(b), "log_loss_after": float(a)}
            for n, b, a in zip(self.names, self.before, self.after)
        ]


def fit_calibration(
    cases: Sequence[tuple[ProbabilityStack, np.ndarray]],
) -> tuple[IsotonicModel, CalibrationReport]:
    """Fit one isotonic function per channel over all voxels of all cases.

    Each case pairs a stack with an integer label map (channel index per
    voxel).  The report gives per-channel log-loss before and after on the
    fitting data, per channel before renormalization.
    """
    if not cases:
        raise CalibrationError("calibration needs at least one case")
    names = cases[0][0].names
    n_ch = len(names)
    preds = np.concatenate([np.asarray(s.data, dtype=np.float64).reshape(-1, n_ch) for s, _ in cases])
    labels = np.concatenate([np.asarray(lab).ravel() for _, lab in cases])
    if labels.size != preds.shape[0]:
        raise CalibrationError("label maps do not match stack sizes")
    chans, before, after = [], np.empty(n_ch), np.empty(n_ch)
    for c in range(n_ch):
        p = preds[:, c]
        t = (labels == c).astype(np.float64)
        before[c] = log_loss(p, t)
        if t.min() == t.max():
            logger.warning("channel %s has single-class truth; using identity calibration", names[c])
            f = IsotonicChannel.make_identity()
        else:
            order = np.argsort(p, kind="stable")
            f = fit_isotonic_pava(p[order], t[order])
        chans.append(f)
        after[c] = log_loss(f(p), t)
    return IsotonicModel(tuple(names), tuple(chans)), CalibrationReport(tuple(names), before, after)
