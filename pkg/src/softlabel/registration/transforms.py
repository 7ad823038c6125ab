"""Spatial transforms mapping fixed-image world points to moving-image points.

A chain is applied as ``initial -> affine -> field`` when warping a moving
image, so a fixed point ``x`` samples the moving image at
``initial(affine(x + field(x)))``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np
import yaml

from ..io import read_volume, write_volume
from ..volume import Grid, GeometryError, Volume, sample

N_PARAMS = 12
# translation (mm), rotation (rad), log-scale, shear
PARAM_SCALES = np.array([100.0] * 3 + [0.5] * 3 + [0.2] * 3 + [0.1] * 3)


class TransformError(ValueError):
    pass


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def params_to_matrix(params, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """3x4 matrix of ``y = A (x - c) + c + t`` with ``A = R Sh diag(exp(s))``."""
    p = np.asarray(params, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    shear = np.array([[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]])
    a = _rotation(*p[3:6]) @ shear @ np.diag(np.exp(p[6:9]))
    out = np.empty((3, 4))
    out[:, :3] = a
    out[:, 3] = p[0:3] + c - a @ c
    return out


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray
    params: np.ndarray | None = None
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    info: dict = dc_field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 4)
        if abs(np.linalg.det(m[:, :3])) <= 1e-9:
            raise TransformError("affine matrix is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.params is not None:
            p = np.array(self.params, dtype=np.float64).reshape(N_PARAMS)
            p.setflags(write=False)
            object.__setattr__(self, "params", p)
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "AffineTransform":
        return cls.from_params(np.zeros(N_PARAMS), center)

    @classmethod
    def from_params(cls, params, center=(0.0, 0.0, 0.0)) -> "AffineTransform":
        return cls(params_to_matrix(params, center), params, center)

    @property
    def homogeneous(self) -> np.ndarray:
        out = np.eye(4)
        out[:3] = self.matrix
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        shape = (3,) + (1,) * (points.ndim - 1)
        return np.einsum("ab,b...->a...", self.matrix[:, :3], points) + self.matrix[:, 3].reshape(shape)

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """``self(inner(x))``."""
        return AffineTransform((self.homogeneous @ inner.homogeneous)[:3])

    def to_text(self) -> str:
        params = self.params if self.params is not None else np.full(N_PARAMS, np.nan)
        lines = [
            "params: " + " ".join(repr(float(x)) for x in params),
            "center: " + " ".join(repr(float(x)) for x in self.center),
            "matrix:",
        ]
        lines += [" ".join(repr(float(x)) for x in row) for row in self.matrix]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AffineTransform":
        params = None
        center = (0.0, 0.0, 0.0)
        rows = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line or line == "matrix:":
                continue
            if line.startswith("params:"):
                vals = [float(x) for x in line.split(":", 1)[1].split()]
                params = None if any(np.isnan(vals)) else vals
            elif line.startswith("center:"):
                center = tuple(float(x) for x in line.split(":", 1)[1].split())
            else:
                rows.append([float(x) for x in line.split()])
        if len(rows) == 4 and rows[3] == [0.0, 0.0, 0.0, 1.0]:
            rows = rows[:3]
        if len(rows) != 3 or any(len(r) != 4 for r in rows):
            raise TransformError("expected a 3x4 affine matrix")
        return cls(np.array(rows), params, center)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "AffineTransform":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class DeformationField:
    """Displacements in mm on the fixed grid, channels last (dx, dy, dz)."""

    grid: Grid
    data: np.ndarray
    info: dict = dc_field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.shape != self.grid.dims + (3,):
            raise GeometryError(f"field shape {d.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(d)):
            raise TransformError("deformation field has non-finite values")
        object.__setattr__(self, "data", d)

    @classmethod
    def zeros(cls, grid: Grid) -> "DeformationField":
        return cls(grid, np.zeros(grid.dims + (3,)))

    def displacement_at(self, points: np.ndarray) -> np.ndarray:
        """Trilinear displacement at world points; zero outside the grid."""
        idx = self.grid.world_to_index(points)
        return np.stack([sample(self.data[..., c], idx, 1, 0.0)[0] for c in range(3)])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return points + self.displacement_at(points)

    def to_volume(self) -> Volume:
        return Volume(self.grid, self.data, "displacement")


@dataclass(frozen=True)
class TransformChain:
    initial: AffineTransform | None = None
    affine: AffineTransform = dc_field(default_factory=AffineTransform.identity)
    field: DeformationField | None = None
    provenance: dict = dc_field(default_factory=dict)

    def affine_part(self) -> AffineTransform:
        """``initial o affine`` as one matrix."""
        if self.initial is None:
            return self.affine
        return self.initial.compose(self.affine)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        if self.field is not None:
            points = self.field(points)
        points = self.affine(points)
        if self.initial is not None:
            points = self.initial(points)
        return points

    def save(self, path) -> None:
        path = Path(path)
        doc = {"format": "softlabel-chain", "version": 1}
        if self.initial is not None:
            doc["initial"] = self.initial.to_text()
        doc["affine"] = self.affine.to_text()
        if self.field is not None:
            fpath = path.with_name(path.stem + ".field.nii")
            write_volume(self.field.to_volume(), fpath)
            doc["field"] = fpath.name
        doc["provenance"] = _plain(self.provenance)
        path.write_text(yaml.safe_dump(doc, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TransformChain":
        path = Path(path)
        doc = yaml.safe_load(path.read_text())
        if not isinstance(doc, dict) or doc.get("format") != "softlabel-chain":
            raise TransformError(f"{path}: not a transform chain file")
        initial = AffineTransform.from_text(doc["initial"]) if "initial" in doc else None
        affine = AffineTransform.from_text(doc["affine"])
        fld = None
        if "field" in doc:
            vol = read_volume(path.with_name(doc["field"]))
            fld = DeformationField(vol.grid, vol.data)
        return cls(initial, affine, fld, doc.get("provenance", {}))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def apply_transform(
    moving: Volume, chain: TransformChain, target: Grid, interp: str = "trilinear", cval: float = 0.0
) -> Volume:
    """Warp ``moving`` onto ``target`` through ``chain``."""
    order = {"trilinear": 1, "nearest": 0}[interp]
    pts = chain.map_points(target.world_coordinates())
    idx = moving.grid.world_to_index(pts)
    if moving.data.ndim == 3:
        vals, _ = sample(moving.data, idx, order, cval)
    else:
        vals = np.stack(
            [sample(moving.data[..., c], idx, order, cval)[0] for c in range(moving.data.shape[3])],
            axis=-1,
        )
    return Volume(target, vals.astype(moving.data.dtype, copy=False), moving.unit)


# -- initial alignment ----------------------------------------------------

_NUM = re.compile(r"^[-+0-9.eE\s]+$")


def _parse_label_table(text: str) -> tuple[dict[str, list[int]], float, float]:
    thickness, origin = 1.0, 0.0
    spans: dict[str, list[int]] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.replace(":", " ").partition(" ")
        rest = rest.strip()
        if key == "thickness":
            thickness = float(rest)
        elif key == "origin":
            origin = float(rest)
        else:
            idx = int(key)
            spans.setdefault(rest.lower(), []).append(idx)
    if not spans:
        raise TransformError("label table has no rows")
    return spans, thickness, origin


def _centroids(spans, thickness, origin) -> dict[str, float]:
    return {r: origin + thickness * (min(s) + max(s)) / 2.0 for r, s in spans.items()}


def load_initial_alignment(path, atlas_table=None) -> AffineTransform:
    """Initial target-to-atlas alignment.

    ``path`` is either a 3x4 matrix text file or a per-slice body-region table
    (``<slice> <label>`` rows plus optional ``thickness``/``origin`` lines, mm).
    For tables, ``atlas_table`` is the matching atlas table and the result is a
    z scale and translation mapping target region centroids onto the atlas
    centroids (least squares over shared regions).
    """
    text = Path(path).read_text()
    body = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    body = [ln for ln in body if ln]
    try:
        if all(ln.startswith(("params", "center", "matrix")) or _NUM.match(ln) for ln in body) and all(
            len(ln.split()) == 4 for ln in body if _NUM.match(ln)
        ):
            return AffineTransform.from_text(text)
    except (TransformError, ValueError) as exc:
        raise TransformError(f"{path}: unparseable affine ({exc})") from exc
    if atlas_table is None:
        raise TransformError(f"{path}: label table given without an atlas table")
    try:
        tgt = _centroids(*_parse_label_table(text))
        atl = _centroids(*_parse_label_table(Path(atlas_table).read_text()))
    except ValueError as exc:
        raise TransformError(f"unparseable label table ({exc})") from exc
    shared = sorted(set(tgt) & set(atl))
    if not shared:
        raise TransformError("label tables share no body region")
    zt = np.array([tgt[r] for r in shared])
    za = np.array([atl[r] for r in shared])
    scale = 1.0
    if len(shared) > 1 and np.ptp(zt) > 0:
        scale = float(np.polyfit(zt, za, 1)[0])
        if scale <= 0:
            scale = 1.0
    shift = float(np.mean(za - scale * zt))
    m = np.eye(3, 4)
    m[2, 2] = scale
    m[2, 3] = shift
    return AffineTransform(m)
