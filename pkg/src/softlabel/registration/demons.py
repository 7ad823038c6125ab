"""Multi-resolution diffeomorphic demons on the affinely pre-aligned image."""
from __future__ import annotations

import logging

import numpy as np

from .._interp import trilinear
from ..volume import Grid, Volume, check_schedule, sample, shrink_volume, smooth_array
from .affine import RegistrationError, _masked_mse, mse_metric
from .config import DemonsConfig, RegistrationConfig
from .transforms import DeformationField, TransformChain, apply_transform

logger = logging.getLogger(__name__)

DENOM_FLOOR = 1e-9


def _mm_to_index(grid: Grid, disp: np.ndarray) -> np.ndarray:
    """World displacement ``(..., 3)`` to voxel-index offsets ``(3, ...)``."""
    local = disp @ grid.orientation  # rows: O^T d
    return np.moveaxis(local / np.asarray(grid.spacing), -1, 0)


def _interp_field(field: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return trilinear(field, coords, extend=True)[0]


def exponentiate(velocity: np.ndarray, grid: Grid, steps: int = 6) -> np.ndarray:
    """Displacement of ``exp(velocity)`` by scaling and squaring."""
    ijk = np.indices(grid.dims, dtype=np.float64)
    disp = velocity / float(2**steps)
    for _ in range(steps):
        disp = disp + _interp_field(disp, ijk + _mm_to_index(grid, disp))
    return disp


def _gradient_world(img: np.ndarray, grid: Grid) -> np.ndarray:
    g = np.stack(
        [np.gradient(img, axis=a) / grid.spacing[a] if img.shape[a] > 1 else np.zeros_like(img) for a in range(3)],
        axis=-1,
    )
    return g @ grid.orientation.T


def jacobian_determinant(field: DeformationField) -> np.ndarray:
    """det(I + grad u) per voxel, derivatives in world units."""
    grid = field.grid
    jac = np.empty(grid.dims + (3, 3))
    for c in range(3):
        jac[..., c, :] = _gradient_world(field.data[..., c], grid)
    jac += np.eye(3)
    return np.linalg.det(jac)


def _upsample(vel: np.ndarray, src: Grid, dst: Grid) -> np.ndarray:
    idx = src.world_to_index(dst.world_coordinates())
    return _interp_field(vel, idx)


def demons_force(
    fixed: np.ndarray, warped: np.ndarray, grad: np.ndarray, lr: float, valid: np.ndarray
) -> np.ndarray:
    """Thirion force ``lr (f - m) grad f / (|grad f|^2 + (f - m)^2)``.

    Written for fixed-to-moving displacement, so a positive ``f - m`` pushes
    sampling up the fixed gradient.
    """
    diff = fixed - warped
    denom = np.einsum("...i,...i->...", grad, grad) + diff**2
    ok = valid & (denom >= DENOM_FLOOR)
    scale = np.zeros_like(diff)
    scale[ok] = lr * diff[ok] / denom[ok]
    return grad * scale[..., None]


def register_demons(
    fixed: Volume,
    moving: Volume,
    init: TransformChain | None = None,
    cfg: RegistrationConfig | DemonsConfig | None = None,
) -> DeformationField:
    """Dense displacement on the fixed grid refining ``init`` (initial + affine).

    Intensities are divided by the fixed image RMS before forces are computed.
    The returned field carries per-level iteration counts and MSE in ``info``;
    it is the zero field whenever refinement would raise the full-resolution MSE.
    """
    if cfg is None:
        cfg = DemonsConfig()
    elif isinstance(cfg, RegistrationConfig):
        cfg = cfg.demons
    check_schedule(cfg.shrinks, cfg.smoothing_widths)
    init = init or TransformChain()
    pre_chain = TransformChain(init.initial, init.affine)

    warped0 = apply_transform(moving, pre_chain, fixed.grid)
    valid_vol = apply_transform(
        Volume(moving.grid, np.ones(moving.grid.dims), "mask"), pre_chain, fixed.grid
    )
    f_full = np.asarray(fixed.data, dtype=np.float64)
    rms = float(np.sqrt(np.mean(f_full**2))) or 1.0

    fixed_n = Volume(fixed.grid, f_full / rms, "dimensionless")
    moving_n = Volume(fixed.grid, np.asarray(warped0.data, dtype=np.float64) / rms, "dimensionless")
    valid_n = Volume(fixed.grid, valid_vol.data.astype(np.float64), "dimensionless")

    vel = None
    prev_grid = None
    levels = []
    for shrink, width in zip(cfg.shrinks, cfg.smoothing_widths):
        img_sigma = 0.5 * shrink if shrink > 1 else 0.0
        f_l = shrink_volume(fixed_n, shrink, img_sigma)
        m_l = shrink_volume(moving_n, shrink, img_sigma)
        v_l = shrink_volume(valid_n, shrink, 0.0)
        grid = f_l.grid
        vel = np.zeros(grid.dims + (3,)) if vel is None else _upsample(vel, prev_grid, grid)
        prev_grid = grid
        grad = _gradient_world(f_l.data, grid)
        ijk = np.indices(grid.dims, dtype=np.float64)

        history: list[float] = []
        best = (np.inf, vel)
        it = 0
        for it in range(cfg.max_iterations):
            disp = exponentiate(vel, grid, cfg.squaring_steps)
            coords = ijk + _mm_to_index(grid, disp)
            warped, inside = sample(m_l.data, coords, 1, 0.0)
            valid = inside & (sample(v_l.data, coords, 1, 0.0)[0] > 0.5)
            mse = _masked_mse(f_l.data, warped, valid)
            if not np.isfinite(mse):
                raise RegistrationError("demons metric became non-finite")
            history.append(mse)
            if mse < best[0]:
                best = (mse, vel)
            if mse <= 1e-20:
                break
            w = cfg.convergence_window
            if len(history) > w:
                ref = history[-w - 1]
                if (ref - history[-1]) / ref < cfg.tolerance:
                    break
            upd = demons_force(f_l.data, warped, grad, cfg.learning_rate, valid)
            if width > 0:
                upd = smooth_array(upd, (width, width, width, 0))
            vel = vel + upd
            if cfg.field_sigma > 0:
                vel = smooth_array(vel, (cfg.field_sigma,) * 3 + (0,))
            if not np.all(np.isfinite(vel)):
                raise RegistrationError("demons field became non-finite")
        vel = best[1]
        levels.append({"shrink": shrink, "iterations": it, "mse": best[0] * rms**2})
        logger.debug("demons level shrink=%d: %d iterations, mse %.6g", shrink, it, best[0])

    disp = exponentiate(vel, fixed.grid, cfg.squaring_steps)
    start_mse = mse_metric(fixed, moving, pre_chain)
    final_mse = mse_metric(
        fixed, moving, TransformChain(init.initial, init.affine, DeformationField(fixed.grid, disp))
    )
    if final_mse > start_mse:
        disp, final_mse = np.zeros_like(disp), start_mse
    info = {"levels": levels, "initial_mse": start_mse, "final_mse": final_mse}
    return DeformationField(fixed.grid, disp, info=info)
