"""MSE metric and multi-resolution Nelder-Mead affine registration."""
from __future__ import annotations

import logging

import numpy as np
from scipy import optimize

from ..volume import Volume, sample, shrink_volume, check_schedule
from .config import AffineConfig, RegistrationConfig
from .transforms import (
    N_PARAMS,
    PARAM_SCALES,
    AffineTransform,
    TransformChain,
    params_to_matrix,
)

logger = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


def _masked_mse(fixed_vals: np.ndarray, moving_vals: np.ndarray, inside: np.ndarray) -> float:
    n = int(inside.sum())
    if n == 0:
        raise RegistrationError("transformed moving image does not overlap the fixed image")
    diff = fixed_vals[inside] - moving_vals[inside]
    return float(np.dot(diff, diff) / n)


def mse_metric(fixed: Volume, moving: Volume, transform: TransformChain) -> float:
    """Mean squared difference over fixed voxels that map inside the moving image."""
    pts = transform.map_points(fixed.grid.world_coordinates())
    vals, inside = sample(moving.data, moving.grid.world_to_index(pts), 1, 0.0)
    return _masked_mse(fixed.data, vals, inside)


class _AffineCost:
    """MSE as a function of the 12 affine parameters on one pyramid level."""

    def __init__(self, fixed: Volume, moving: Volume, center, initial: AffineTransform | None):
        self.fixed = fixed.data.ravel()
        self.moving = moving
        self.center = center
        ijk = np.indices(fixed.grid.dims, dtype=np.float64).reshape(3, -1)
        self.ijk_h = np.vstack([ijk, np.ones((1, ijk.shape[1]))])
        pre = np.linalg.inv(moving.grid.affine)
        if initial is not None:
            pre = pre @ initial.homogeneous
        self.pre = pre
        self.post = fixed.grid.affine
        self.evaluations = 0

    def __call__(self, params: np.ndarray) -> float:
        self.evaluations += 1
        m = np.eye(4)
        m[:3] = params_to_matrix(params, self.center)
        k = self.pre @ m @ self.post
        idx = k[:3] @ self.ijk_h
        vals, inside = sample(self.moving.data, idx, 1, 0.0)
        val = _masked_mse(self.fixed, vals, inside)
        if not np.isfinite(val):
            raise RegistrationError(f"non-finite MSE at parameters {params.tolist()}")
        return val


def register_affine(
    fixed: Volume,
    moving: Volume,
    init: AffineTransform | None = None,
    cfg: RegistrationConfig | AffineConfig | None = None,
    initial: AffineTransform | None = None,
) -> AffineTransform:
    """Fit the affine part of ``x -> initial(affine(x))`` by Nelder-Mead on MSE.

    ``init`` seeds the 12 parameters (identity by default); ``initial`` is a
    fixed pre-alignment kept outside the optimisation.  The returned transform
    carries ``info`` provenance with per-level iterations and the final MSE,
    and never has a higher full-resolution MSE than ``init``.
    """
    if cfg is None:
        cfg = AffineConfig()
    elif isinstance(cfg, RegistrationConfig):
        cfg = cfg.affine
    check_schedule(cfg.shrinks, cfg.sigmas)
    center = tuple(fixed.grid.affine[:3] @ np.append((np.asarray(fixed.grid.dims) - 1) / 2.0, 1.0))
    if init is not None and init.params is not None:
        start = np.asarray(init.params, dtype=np.float64).copy()
        center = init.center
    elif init is None:
        start = np.zeros(N_PARAMS)
    else:
        raise ValueError("init must carry optimisation parameters")

    full_cost = _AffineCost(fixed, moving, center, initial)
    start_mse = full_cost(start)

    z = start / PARAM_SCALES
    levels = []
    for shrink, sigma in zip(cfg.shrinks, cfg.sigmas):
        f_lvl = shrink_volume(fixed, shrink, sigma)
        m_lvl = shrink_volume(moving, shrink, sigma)
        cost = _AffineCost(f_lvl, m_lvl, center, initial)

        def fz(zz, cost=cost):
            return cost(zz * PARAM_SCALES)

        f0 = fz(z)
        simplex = np.vstack([z] + [z + cfg.simplex_delta * e for e in np.eye(N_PARAMS)])
        res = optimize.minimize(
            fz,
            z,
            method="Nelder-Mead",
            options={
                "initial_simplex": simplex,
                "maxiter": cfg.max_iterations,
                "xatol": cfg.tolerance,
                "fatol": cfg.tolerance * max(f0, np.finfo(float).tiny),
            },
        )
        if res.fun <= f0:
            z = res.x
        levels.append({"shrink": shrink, "iterations": int(res.nit), "mse": float(min(res.fun, f0))})
        logger.debug("affine level shrink=%d: %d iterations, mse %.6g", shrink, res.nit, res.fun)

    params = z * PARAM_SCALES
    final_mse = full_cost(params)
    if final_mse > start_mse:
        params, final_mse = start, start_mse
    return AffineTransform(
        params_to_matrix(params, center),
        params,
        center,
        info={"levels": levels, "initial_mse": start_mse, "final_mse": final_mse},
    )
