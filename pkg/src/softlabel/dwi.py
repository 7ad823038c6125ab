"""Monoexponential diffusion fit and input normalisation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import Volume

SIGNAL_EPS = 1e-6
ADC_SCALE = 3.5e-3  # mm^2/s


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class BValueSeries:
    bvalues: tuple[float, ...]
    volumes: tuple[Volume, ...]

    def __post_init__(self):
        object.__setattr__(self, "bvalues", tuple(float(b) for b in self.bvalues))
        object.__setattr__(self, "volumes", tuple(self.volumes))
        if len(self.bvalues) != len(self.volumes):
            raise ValueError("one volume per b-value is required")
        if len(set(self.bvalues)) < 2:
            raise ValueError("at least two distinct b-values are required")
        if min(self.bvalues) < 0:
            raise ValueError("b-values must be non-negative")
        g0 = self.volumes[0].grid
        for v in self.volumes[1:]:
            if not v.grid.same_as(g0):
                raise ValueError("all b-value volumes must share one grid")


@dataclass(frozen=True)
class FitResult:
    adc: Volume
    s0: Volume


def fit_monoexponential(series: BValueSeries) -> FitResult:
    """Log-linear least squares of ``ln S`` against ``b`` at every voxel.

    Negative ADC values (rising signal) are kept as they are.
    """
    b = np.asarray(series.bvalues)
    logs = np.stack(
        [np.log(np.maximum(np.asarray(v.data, dtype=np.float64), SIGNAL_EPS)) for v in series.volumes]
    )
    bc = b - b.mean()
    y_mean = logs.mean(axis=0)
    slope = np.tensordot(bc, logs - y_mean, axes=1) / np.dot(bc, bc)
    intercept = y_mean - slope * b.mean()
    grid = series.volumes[0].grid
    return FitResult(Volume(grid, -slope, "adc"), Volume(grid, np.exp(intercept), "signal"))


def scale_adc(adc: Volume) -> Volume:
    return adc.with_data(np.asarray(adc.data, dtype=np.float64) / ADC_SCALE, "dimensionless")


def scale_s0(s0: Volume, body_mask: np.ndarray | None = None) -> Volume:
    """``ln S0 / max ln S0``, with S0 clamped to at least 1 before the log.

    With ``body_mask`` the normaliser is taken over masked voxels only.
    """
    logs = np.log(np.maximum(np.asarray(s0.data, dtype=np.float64), 1.0))
    ref = logs[np.asarray(body_mask, dtype=bool)] if body_mask is not None else logs
    top = ref.max() if ref.size else 0.0
    if top <= 0:
        raise DegenerateInputError("S0 volume has no voxel above 1; cannot normalise")
    return s0.with_data(logs / top, "dimensionless")


def series_from_pairs(pairs: Sequence[tuple[float, Volume]]) -> BValueSeries:
    ordered = sorted(pairs, key=lambda p: p[0])
    return BValueSeries(tuple(b for b, _ in ordered), tuple(v for _, v in ordered))
