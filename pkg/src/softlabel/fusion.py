"""Soft labels from registered atlases: inverse-MSE weighted mask fusion."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dwi import scale_adc
from .registration import (
    AffineTransform,
    RegistrationConfig,
    TransformChain,
    apply_transform,
    mse_metric,
    register_affine,
    register_demons,
)
from .stack import ATLAS_REGIONS, CHANNELS, FOREGROUND, ProbabilityStack
from .volume import GeometryError, Volume

logger = logging.getLogger(__name__)

RANGE_TOL = 1e-6


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class AtlasSource:
    """An atlas case before registration: ADC map and its region masks."""

    id: str
    adc: Volume
    masks: Mapping[str, Volume]


@dataclass(frozen=True)
class AtlasEntry:
    """An atlas case registered to one target, masks warped to the target grid."""

    id: str
    adc: Volume
    masks: Mapping[str, Volume]
    mse: float
    chain: TransformChain = field(default_factory=TransformChain)


def fuse_soft_labels(entries: Sequence[AtlasEntry], region: str) -> Volume:
    """``sum_i w_i M_ij / sum_i w_i`` with ``w_i = 1 / MSE_i``.

    Entries are reduced in atlas-id order so the result does not depend on the
    order they are passed in.
    """
    if not entries:
        raise FusionError("at least one atlas entry is required")
    ordered = sorted(entries, key=lambda e: e.id)
    grid = ordered[0].masks[region].grid
    num = np.zeros(grid.dims)
    den = 0.0
    for e in ordered:
        if not e.mse > 0:
            raise FusionError(f"atlas {e.id}: MSE must be positive, got {e.mse}")
        mask = e.masks[region]
        if not mask.grid.same_as(grid):
            raise GeometryError(f"atlas {e.id}: {region} mask is not on the target grid")
        w = 1.0 / e.mse
        num += w * np.clip(mask.data, 0.0, 1.0)
        den += w
    return Volume(grid, np.clip(num / den, 0.0, 1.0), "probability")


def assemble_stack(class_maps: Sequence[Volume], spinal_canal: Volume) -> ProbabilityStack:
    """Stack 11 fused maps and the spinal canal map, then add background.

    Voxels whose foreground sum exceeds 1 have their foreground channels
    rescaled to sum to 1 (background 0 there).
    """
    maps = list(class_maps) + [spinal_canal]
    if len(maps) != len(FOREGROUND):
        raise FusionError(f"expected {len(FOREGROUND) - 1} class maps plus the spinal canal")
    grid = maps[0].grid
    for m in maps:
        if not m.grid.same_as(grid):
            raise GeometryError("class maps are not on one grid")
        if m.data.min() < -RANGE_TOL or m.data.max() > 1 + RANGE_TOL:
            raise FusionError("class map values outside [0, 1]")
    fg = np.clip(np.stack([np.asarray(m.data, dtype=np.float64) for m in maps], axis=-1), 0.0, 1.0)
    total = fg.sum(axis=-1, keepdims=True)
    over = total > 1.0
    fg = np.where(over, fg / np.where(over, total, 1.0), fg)
    bg = np.clip(1.0 - fg.sum(axis=-1, keepdims=True), 0.0, 1.0)
    return ProbabilityStack(grid, np.concatenate([fg, bg], axis=-1), CHANNELS)


def register_atlas(
    target_adc: Volume,
    atlas: AtlasSource,
    cfg: RegistrationConfig,
    initial: AffineTransform | None = None,
) -> tuple[AtlasEntry, dict]:
    """Register one atlas ADC onto the target and warp its masks."""
    t0 = time.perf_counter()
    fixed = scale_adc(target_adc)
    moving = scale_adc(atlas.adc)
    aff = register_affine(fixed, moving, cfg=cfg, initial=initial)
    fld = register_demons(fixed, moving, TransformChain(initial, aff), cfg)
    chain = TransformChain(
        initial,
        aff,
        fld,
        {"affine": aff.info, "demons": fld.info},
    )
    mse = mse_metric(target_adc, atlas.adc, chain)
    warped = {
        r: Volume(
            target_adc.grid,
            np.clip(apply_transform(m, chain, target_adc.grid).data, 0.0, 1.0),
            "probability",
        )
        for r, m in atlas.masks.items()
    }
    # an exact match would give an infinite weight; the floor keeps fusion weights finite
    entry = AtlasEntry(atlas.id, atlas.adc, warped, max(mse, np.finfo(float).tiny), chain)
    record = {
        "atlas": atlas.id,
        "mse": mse,
        "affine_mse": aff.info["final_mse"],
        "wall_time": time.perf_counter() - t0,
    }
    return entry, record


def _register_job(args):
    return register_atlas(*args)


def annotate_case(
    target_adc: Volume,
    atlas: Sequence[AtlasSource],
    cfg: RegistrationConfig | None = None,
    spinal_canal: Volume | None = None,
    alignments: Mapping[str, AffineTransform] | None = None,
    workers: int = 1,
) -> tuple[ProbabilityStack, list[dict]]:
    """Register every atlas to the target, fuse per region and assemble.

    Returns the stack and one log record per atlas (id, MSE, wall time).
    """
    if not atlas:
        raise FusionError("atlas list is empty")
    cfg = cfg or RegistrationConfig()
    alignments = alignments or {}
    jobs = [(target_adc, a, cfg, alignments.get(a.id)) for a in sorted(atlas, key=lambda a: a.id)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_register_job, jobs))
    else:
        results = [_register_job(j) for j in jobs]
    entries = [r[0] for r in results]
    records = [r[1] for r in results]
    fused = [fuse_soft_labels(entries, region) for region in ATLAS_REGIONS]
    if spinal_canal is None:
        logger.warning("no spinal canal map supplied; channel left empty")
        spinal_canal = Volume(target_adc.grid, np.zeros(target_adc.grid.dims), "probability")
    elif not spinal_canal.grid.same_as(target_adc.grid):
        spinal_canal = Volume(
            target_adc.grid,
            apply_transform(spinal_canal, TransformChain(), target_adc.grid).data,
            "probability",
        )
    canal = spinal_canal.with_data(np.clip(spinal_canal.data, 0.0, 1.0), "probability")
    return assemble_stack(fused, canal), records
