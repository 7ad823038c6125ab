"""The 13-channel region probability stack."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import Grid, GeometryError, Volume

SKELETON = (
    "legs",
    "pelvis",
    "lumbar_spine",
    "thoracic_spine",
    "cervical_spine",
    "ribcage",
    "arms_shoulders",
)
ORGANS = ("liver", "spleen", "urinary_bladder", "kidneys")
ATLAS_REGIONS = SKELETON + ORGANS
SPINAL_CANAL = "spinal_canal"
BACKGROUND = "background"
FOREGROUND = ATLAS_REGIONS + (SPINAL_CANAL,)
CHANNELS = FOREGROUND + (BACKGROUND,)
N_CHANNELS = len(CHANNELS)

SUM_TOL = 1e-6


class StackError(ValueError):
    pass


@dataclass(frozen=True)
class ProbabilityStack:
    """Per-voxel class probabilities, channels last, background last."""

    grid: Grid
    data: np.ndarray
    names: tuple[str, ...] = CHANNELS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.shape != self.grid.dims + (len(self.names),):
            raise GeometryError(
                f"stack shape {data.shape} does not match grid {self.grid.dims} "
                f"with {len(self.names)} channels"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_volume(cls, v: Volume, names: Sequence[str] = CHANNELS) -> "ProbabilityStack":
        return cls(v.grid, v.data, tuple(names))

    def to_volume(self) -> Volume:
        return Volume(self.grid, self.data, "probability")

    def channel(self, name_or_index) -> np.ndarray:
        idx = name_or_index if isinstance(name_or_index, int) else self.names.index(name_or_index)
        return self.data[..., idx]

    def check(self, tol: float = SUM_TOL) -> None:
        """Raise :class:`StackError` unless range and sum-to-one hold."""
        d = self.data
        if not np.all(np.isfinite(d)):
            raise StackError("stack contains non-finite values")
        if d.min() < -tol or d.max() > 1 + tol:
            raise StackError(f"stack values outside [0, 1]: [{d.min()}, {d.max()}]")
        err = np.abs(d.sum(axis=-1, dtype=np.float64) - 1.0).max()
        if err > tol:
            raise StackError(f"channel sums deviate from 1 by {err:.3g}")


def one_hot_stack(grid: Grid, labels: np.ndarray, n: int = N_CHANNELS) -> ProbabilityStack:
    """Stack from an integer label map (``n - 1`` marks background)."""
    data = np.zeros(grid.dims + (n,), dtype=np.float32)
    np.put_along_axis(data, labels[..., None].astype(np.intp), 1.0, axis=-1)
    return ProbabilityStack(grid, data)
