"""Volumes with physical geometry plus resampling and smoothing helpers.

Voxel index ``(i, j, k)`` maps to world millimetres as
``origin + orientation @ (spacing * (i, j, k))``.  Arrays are indexed
``data[i, j, k]`` with an optional trailing channel axis.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._interp import trilinear

logger = logging.getLogger(__name__)

UNIT_TAGS = ("signal", "adc", "probability", "mask", "displacement", "dimensionless")


class GeometryError(ValueError):
    """Raised for degenerate or inconsistent grids."""


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        orient = np.array(self.orientation, dtype=np.float64).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise GeometryError(f"grid dims must be three positive ints, got {dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise GeometryError(f"grid spacing must be positive, got {spacing}")
        if not np.allclose(orient.T @ orient, np.eye(3), atol=1e-6):
            raise GeometryError("orientation columns must be orthonormal")
        orient.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "orientation", orient)

    @classmethod
    def from_affine(cls, dims: Sequence[int], affine: np.ndarray) -> "Grid":
        affine = np.asarray(affine, dtype=np.float64)
        cols = affine[:3, :3]
        spacing = np.linalg.norm(cols, axis=0)
        if np.any(spacing <= 0):
            raise GeometryError("affine has a zero-length axis")
        return cls(tuple(dims), tuple(spacing), tuple(affine[:3, 3]), cols / spacing)

    @property
    def affine(self) -> np.ndarray:
        """4x4 index-to-world matrix."""
        out = np.eye(4)
        out[:3, :3] = self.orientation * np.asarray(self.spacing)
        out[:3, 3] = self.origin
        return out

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self) -> float:
        """Voxel volume in mm^3."""
        return float(np.prod(self.spacing))

    def world_coordinates(self) -> np.ndarray:
        """World position of every voxel centre, shape ``(3, nx, ny, nz)``."""
        idx = np.indices(self.dims, dtype=np.float64)
        return np.einsum("ab,b...->a...", self.affine[:3, :3], idx) + np.asarray(
            self.origin
        ).reshape(3, 1, 1, 1)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Map world points ``(3, ...)`` to continuous voxel indices."""
        inv = np.linalg.inv(self.affine)
        return np.einsum("ab,b...->a...", inv[:3, :3], points) + inv[:3, 3].reshape(
            (3,) + (1,) * (points.ndim - 1)
        )

    def same_as(self, other: "Grid", tol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.orientation, other.orientation, atol=1e-6)
        )

    def shrink(self, factor: int) -> "Grid":
        """Coarser grid covering the same extent, voxel size times ``factor``."""
        if factor == 1:
            return self
        dims = tuple(max(1, math.ceil(d / factor)) for d in self.dims)
        spacing = tuple(s * factor for s in self.spacing)
        shift = self.orientation @ (np.asarray(self.spacing) * (factor - 1) / 2.0)
        origin = tuple(np.asarray(self.origin) + shift)
        return Grid(dims, spacing, origin, self.orientation)


@dataclass(frozen=True)
class Volume:
    grid: Grid
    data: np.ndarray
    unit: str = "signal"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.shape[:3] != self.grid.dims or data.ndim not in (3, 4):
            raise GeometryError(
                f"data shape {data.shape} does not match grid dims {self.grid.dims}"
            )
        if self.unit not in UNIT_TAGS:
            raise ValueError(f"unknown unit tag {self.unit!r}")
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[3]

    def with_data(self, data: np.ndarray, unit: str | None = None) -> "Volume":
        return Volume(self.grid, data, self.unit if unit is None else unit)

    def channel(self, c: int) -> "Volume":
        return Volume(self.grid, self.data[..., c], self.unit)


def sample(
    data: np.ndarray, index_coords: np.ndarray, order: int = 1, cval: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate a 3D array at continuous voxel indices.

    Points inside the voxel extent ``[-0.5, n - 0.5]`` are interpolated with
    clamped edges; points outside get ``cval``.  Returns ``(values, inside)``.
    """
    if order == 1:
        return trilinear(data, index_coords, cval)
    inside = np.ones(index_coords.shape[1:], dtype=bool)
    for ax in range(3):
        c = index_coords[ax]
        inside &= (c >= -0.5) & (c <= data.shape[ax] - 0.5)
    vals = ndimage.map_coordinates(
        data, index_coords, order=order, mode="nearest", prefilter=False
    )
    vals[~inside] = cval
    return vals, inside


def _resample_array(v: Volume, target: Grid, order: int, cval: float):
    coords = target.world_coordinates()
    idx = v.grid.world_to_index(coords)
    if v.data.ndim == 3:
        vals, inside = sample(v.data, idx, order, cval)
        return vals, inside
    chans = []
    inside = None
    for c in range(v.data.shape[3]):
        vals, inside = sample(v.data[..., c], idx, order, cval)
        chans.append(vals)
    return np.stack(chans, axis=-1), inside


def resample(
    v: Volume, target: Grid, interp: str = "trilinear", cval: float = 0.0
) -> Volume:
    """Resample ``v`` onto ``target`` through world coordinates.

    Out-of-bounds target voxels receive ``cval``.  A warning is logged when the
    grids only partially overlap.
    """
    order = {"trilinear": 1, "nearest": 0}[interp]
    if v.grid.same_as(target, tol=0.0):
        return Volume(target, v.data.copy(), v.unit)
    vals, inside = _resample_array(v, target, order, cval)
    if not inside.all():
        frac = inside.mean()
        logger.warning("resample: only %.1f%% of target voxels overlap the source", 100 * frac)
    return Volume(target, vals.astype(v.data.dtype, copy=False), v.unit)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(data: np.ndarray, sigma_vox: Sequence[float]) -> np.ndarray:
    """Separable Gaussian over the first three axes, clamp-to-edge."""
    out = np.asarray(data, dtype=np.float64)
    for ax, s in enumerate(sigma_vox):
        if s > 0:
            out = ndimage.correlate1d(out, gaussian_kernel(s), axis=ax, mode="nearest")
    return out


def gaussian_smooth(
    v: Volume, sigma: float | Sequence[float], units: str = "voxel"
) -> Volume:
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    if units == "mm":
        sig = sig / np.asarray(v.grid.spacing)
    elif units != "voxel":
        raise ValueError(f"units must be 'voxel' or 'mm', got {units!r}")
    if not np.any(sig > 0):
        return v
    return v.with_data(smooth_array(v.data, sig).astype(v.data.dtype, copy=False))


@dataclass(frozen=True)
class PyramidLevel:
    volume: Volume
    shrink: int
    sigma: float


@dataclass(frozen=True)
class Pyramid:
    levels: list[PyramidLevel]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)


def check_schedule(shrinks: Sequence[int], sigmas: Sequence[float]) -> None:
    if len(shrinks) != len(sigmas):
        raise ValueError("shrink and sigma schedules must have equal length")
    if not shrinks or shrinks[-1] != 1:
        raise ValueError("shrink schedule must end at 1")
    if any(a <= b for a, b in zip(shrinks, shrinks[1:])):
        raise ValueError("shrink factors must be strictly decreasing")


def shrink_volume(v: Volume, factor: int, sigma: float) -> Volume:
    """Smooth (sigma in input voxels) then resample onto the shrunk grid."""
    smoothed = gaussian_smooth(v, sigma) if sigma > 0 else v
    if factor == 1:
        return smoothed
    # the coarse grid may overhang the source by under one fine voxel; extend edges there
    target = v.grid.shrink(factor)
    idx = v.grid.world_to_index(target.world_coordinates())
    vals, _ = trilinear(smoothed.data, idx, 0.0, extend=True)
    return Volume(target, vals, v.unit)


def build_pyramid(v: Volume, shrinks: Sequence[int], sigmas: Sequence[float]) -> Pyramid:
    check_schedule(shrinks, sigmas)
    levels = [
        PyramidLevel(shrink_volume(v, int(s), float(g)), int(s), float(g))
        for s, g in zip(shrinks, sigmas)
    ]
    return Pyramid(levels)
