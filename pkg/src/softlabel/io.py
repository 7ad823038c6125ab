"""Volume file formats: NIfTI-1 single file and raw float32 plus text sidecar.

The raw format stores a little-endian float32 raster (x fastest) at ``path``
and a ``key: value`` sidecar at ``path + ".txt"``.
"""
from __future__ import annotations

import json
from pathlib import Path

import nibabel as nib
import numpy as np

from .stack import CHANNELS, ProbabilityStack
from .volume import Grid, Volume

SUPPORTED_DTYPES = (np.int16, np.uint16, np.float32, np.float64)
# NIfTI header extension code 6 is "comment"; we keep a JSON blob there.
_EXT_CODE = 6


class FormatError(ValueError):
    pass


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("nifti1", "raw"):
            raise FormatError(f"unknown format {fmt!r}")
        return fmt
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti1"
    if name.endswith(".raw"):
        return "raw"
    raise FormatError(f"cannot infer format from {path}")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".txt")


def _read_nifti(path: Path) -> tuple[Volume, dict]:
    with open(path, "rb") as fh:
        fh.seek(344)
        magic = fh.read(4)
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: not a single-file NIfTI-1 image (magic {magic!r})")
    img = nib.Nifti1Image.load(path)
    hdr = img.header
    if hdr.get_data_dtype().type not in SUPPORTED_DTYPES:
        raise FormatError(f"{path}: unsupported datatype {hdr.get_data_dtype()}")
    dim = hdr["dim"]
    ndim = int(dim[0])
    if ndim > 4 and any(int(d) > 1 for d in dim[5 : ndim + 1]):
        raise FormatError(f"{path}: dimensions beyond the fourth are not supported")

    sform, scode = hdr.get_sform(coded=True)
    qform, qcode = hdr.get_qform(coded=True)
    if scode:
        affine = sform
    elif qcode:
        affine = qform
    else:
        affine = np.diag(list(hdr.get_zooms()[:3]) + [1.0])

    data = np.asanyarray(img.dataobj)
    if data.ndim == 2:
        data = data[..., None]
    if data.ndim > 4:
        data = data.reshape(data.shape[:4])
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.dtype not in (np.float32, np.float64):
        data = data.astype(np.float64)

    meta = {}
    for ext in hdr.extensions:
        if ext.get_code() == _EXT_CODE:
            try:
                meta = json.loads(ext.get_content().decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                meta = {}
    grid = Grid.from_affine(data.shape[:3], affine)
    return Volume(grid, data, meta.get("unit", "signal")), meta


def _write_nifti(v: Volume, path: Path, meta: dict) -> None:
    data = v.data
    if v.unit in ("probability", "mask"):
        data = data.astype(np.float32)
    img = nib.Nifti1Image(data, v.grid.affine)
    img.set_sform(v.grid.affine, code=1)
    img.set_qform(v.grid.affine, code=1)
    img.header.set_data_dtype(data.dtype)
    img.header.set_xyzt_units("mm")
    blob = json.dumps({"unit": v.unit, **meta}, sort_keys=True).encode("utf-8")
    img.header.extensions.append(nib.nifti1.Nifti1Extension(_EXT_CODE, blob))
    nib.save(img, path)


def _read_raw(path: Path) -> tuple[Volume, dict]:
    side = _sidecar(path)
    if not side.exists():
        raise FormatError(f"{path}: missing sidecar {side.name}")
    fields = {}
    for line in side.read_text().splitlines():
        if ":" in line:
            key, val = line.split(":", 1)
            fields[key.strip()] = val.strip()
    try:
        dims = tuple(int(x) for x in fields["dims"].split())
        channels = int(fields.get("channels", "1"))
        spacing = tuple(float(x) for x in fields["spacing"].split())
        origin = tuple(float(x) for x in fields["origin"].split())
        orient = np.array([float(x) for x in fields["orientation"].split()]).reshape(3, 3)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{side}: malformed sidecar ({exc})") from exc
    raw = np.fromfile(path, dtype="<f4")
    shape = dims + ((channels,) if channels > 1 else ())
    if raw.size != int(np.prod(shape)):
        raise FormatError(f"{path}: expected {np.prod(shape)} values, found {raw.size}")
    data = raw.reshape(shape, order="F").astype(np.float32)
    meta = {}
    if "names" in fields:
        meta["names"] = fields["names"].split()
    grid = Grid(dims, spacing, origin, orient)
    return Volume(grid, data, fields.get("unit", "signal")), meta


def _write_raw(v: Volume, path: Path, meta: dict) -> None:
    g = v.grid
    np.asarray(v.data, dtype="<f4").ravel(order="F").tofile(path)
    lines = [
        "dims: " + " ".join(str(d) for d in g.dims),
        f"channels: {v.n_channels}",
        "spacing: " + " ".join(repr(s) for s in g.spacing),
        "origin: " + " ".join(repr(o) for o in g.origin),
        "orientation: " + " ".join(repr(float(x)) for x in g.orientation.ravel()),
        f"unit: {v.unit}",
    ]
    if "names" in meta:
        lines.append("names: " + " ".join(meta["names"]))
    _sidecar(path).write_text("\n".join(lines) + "\n")


def read_volume(path, format: str | None = None) -> Volume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = _detect_format(path, format)
    vol, _ = _read_nifti(path) if fmt == "nifti1" else _read_raw(path)
    return vol


def write_volume(v: Volume, path, format: str | None = None, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = _detect_format(path, format)
    writer = _write_nifti if fmt == "nifti1" else _write_raw
    writer(v, path, meta or {})


def read_stack(path, format: str | None = None) -> ProbabilityStack:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = _detect_format(path, format)
    vol, meta = _read_nifti(path) if fmt == "nifti1" else _read_raw(path)
    names = tuple(meta.get("names", CHANNELS))
    if vol.data.ndim != 4:
        raise FormatError(f"{path}: expected a 4D channel stack")
    return ProbabilityStack(vol.grid, vol.data, names)


def write_stack(stack: ProbabilityStack, path, format: str | None = None, meta: dict | None = None) -> None:
    extra = dict(meta or {})
    extra["names"] = list(stack.names)
    write_volume(stack.to_volume(), path, format, extra)
