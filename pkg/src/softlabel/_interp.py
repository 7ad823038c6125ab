"""Clamped trilinear sampling of multi-channel 3D arrays.

Points inside the voxel extent ``[-0.5, n - 0.5]`` interpolate with edge
clamping; points outside get ``cval`` unless ``extend`` is set, in which case
every point is clamped.  numba is used when available.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None


def _kernel(data, ci, cj, ck, cval, extend, out, inside):
    nx, ny, nz, nc = data.shape
    for p in range(ci.shape[0]):
        x = ci[p]
        y = cj[p]
        z = ck[p]
        ok = -0.5 <= x <= nx - 0.5 and -0.5 <= y <= ny - 0.5 and -0.5 <= z <= nz - 0.5
        inside[p] = ok
        if not ok and not extend:
            for c in range(nc):
                out[p, c] = cval
            continue
        x = min(max(x, 0.0), nx - 1.0)
        y = min(max(y, 0.0), ny - 1.0)
        z = min(max(z, 0.0), nz - 1.0)
        i0 = min(int(x), max(nx - 2, 0))
        j0 = min(int(y), max(ny - 2, 0))
        k0 = min(int(z), max(nz - 2, 0))
        fx = x - i0
        fy = y - j0
        fz = z - k0
        i1 = min(i0 + 1, nx - 1)
        j1 = min(j0 + 1, ny - 1)
        k1 = min(k0 + 1, nz - 1)
        w000 = (1 - fx) * (1 - fy) * (1 - fz)
        w100 = fx * (1 - fy) * (1 - fz)
        w010 = (1 - fx) * fy * (1 - fz)
        w110 = fx * fy * (1 - fz)
        w001 = (1 - fx) * (1 - fy) * fz
        w101 = fx * (1 - fy) * fz
        w011 = (1 - fx) * fy * fz
        w111 = fx * fy * fz
        for c in range(nc):
            out[p, c] = (
                w000 * data[i0, j0, k0, c]
                + w100 * data[i1, j0, k0, c]
                + w010 * data[i0, j1, k0, c]
                + w110 * data[i1, j1, k0, c]
                + w001 * data[i0, j0, k1, c]
                + w101 * data[i1, j0, k1, c]
                + w011 * data[i0, j1, k1, c]
                + w111 * data[i1, j1, k1, c]
            )


if njit is not None:
    _compiled = njit(cache=True, nogil=True)(_kernel)
else:  # pragma: no cover
    _compiled = None


def trilinear(
    data: np.ndarray, coords: np.ndarray, cval: float = 0.0, extend: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``data`` (3D, or 4D channels-last) at index ``coords`` (3, ...).

    Returns ``(values, inside)`` shaped like ``coords.shape[1:]`` (plus the
    channel axis for 4D input).
    """
    squeeze = data.ndim == 3
    arr = data[..., None] if squeeze else data
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    shape = coords.shape[1:]
    flat = np.ascontiguousarray(coords.reshape(3, -1), dtype=np.float64)
    out = np.empty((flat.shape[1], arr.shape[3]))
    inside = np.empty(flat.shape[1], dtype=np.bool_)
    if _compiled is not None:
        _compiled(arr, flat[0], flat[1], flat[2], float(cval), bool(extend), out, inside)
    else:  # pragma: no cover
        _fallback(arr, flat, float(cval), bool(extend), out, inside)
    out = out.reshape(shape + (arr.shape[3],))
    if squeeze:
        out = out[..., 0]
    return out, inside.reshape(shape)


def _fallback(arr, flat, cval, extend, out, inside):  # pragma: no cover
    from scipy import ndimage

    ins = np.ones(flat.shape[1], dtype=bool)
    for ax in range(3):
        ins &= (flat[ax] >= -0.5) & (flat[ax] <= arr.shape[ax] - 0.5)
    for c in range(arr.shape[3]):
        out[:, c] = ndimage.map_coordinates(arr[..., c], flat, order=1, mode="nearest", prefilter=False)
    if not extend:
        out[~ins] = cval
    inside[:] = ins
