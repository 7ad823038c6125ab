"""Per-voxel multiscale context features from scaled ADC and S0."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..volume import Volume, smooth_array

OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.intp)


@dataclass(frozen=True)
class FeatureExtractor:
    """3x3x3 neighbourhoods at each scale, for each input channel, plus coordinates.

    At scale ``s`` (voxels) the input is Gaussian-smoothed with sigma ``s / 2``
    (no smoothing at ``s = 1``) and sampled at offsets ``s * {-1, 0, 1}^3``,
    clamped at the volume edge.  Coordinates are voxel indices divided by
    ``n - 1`` per axis.
    """

    scales: tuple[int, ...] = (1, 2, 4)
    n_inputs: int = 2
    coordinates: bool = True

    @property
    def n_features(self) -> int:
        return self.n_inputs * len(self.scales) * len(OFFSETS) + (3 if self.coordinates else 0)

    def descriptor(self) -> dict:
        return {
            "kind": "multiscale-context",
            "scales": list(self.scales),
            "n_inputs": self.n_inputs,
            "coordinates": self.coordinates,
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "FeatureExtractor":
        if d.get("kind") != "multiscale-context":
            raise ValueError(f"unknown feature extractor {d.get('kind')!r}")
        return cls(tuple(d["scales"]), int(d["n_inputs"]), bool(d["coordinates"]))

    def prepare(self, *inputs: Volume) -> "PreparedInputs":
        if len(inputs) != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} input volumes, got {len(inputs)}")
        grid = inputs[0].grid
        for v in inputs[1:]:
            if not v.grid.same_as(grid):
                raise ValueError("input volumes must share one grid")
        levels = []
        for v in inputs:
            data = np.asarray(v.data, dtype=np.float64)
            for s in self.scales:
                arr = data if s == 1 else smooth_array(data, (s / 2.0,) * 3)
                levels.append(np.ascontiguousarray(arr).ravel())
        return PreparedInputs(self, grid.dims, levels)


@dataclass
class PreparedInputs:
    extractor: FeatureExtractor
    dims: tuple[int, int, int]
    levels: list[np.ndarray]

    def features(self, idx: np.ndarray) -> np.ndarray:
        """Feature rows for voxel indices ``idx`` of shape ``(n, 3)``."""
        ex = self.extractor
        dims = np.asarray(self.dims)
        n = idx.shape[0]
        out = np.empty((n, ex.n_features))
        col = 0
        flat_by_scale = []
        for s in ex.scales:
            pos = np.clip(idx[:, None, :] + s * OFFSETS[None], 0, dims - 1)
            flat_by_scale.append(np.ravel_multi_index((pos[..., 0], pos[..., 1], pos[..., 2]), self.dims))
        k = len(OFFSETS)
        for c in range(ex.n_inputs):
            for si in range(len(ex.scales)):
                arr = self.levels[c * len(ex.scales) + si]
                out[:, col : col + k] = arr[flat_by_scale[si]]
                col += k
        if ex.coordinates:
            out[:, col : col + 3] = idx / np.maximum(dims - 1, 1)
        return out

    def all_indices(self) -> np.ndarray:
        return np.indices(self.dims).reshape(3, -1).T
