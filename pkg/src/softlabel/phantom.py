"""Deterministic whole-body DWI phantom built from geometric primitives.

Region geometry is defined in fractions of the field of view (x left-right,
y anterior-posterior, z inferior-superior), so any grid size reproduces the
same anatomy.  Family members are the base anatomy seen through a smooth
sinusoidal warp plus a rigid shift; labels are evaluated analytically at the
warped positions, so member masks stay disjoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dwi import BValueSeries
from .stack import ATLAS_REGIONS, CHANNELS, N_CHANNELS, ProbabilityStack, one_hot_stack
from .volume import Grid, Volume

BACKGROUND_LABEL = N_CHANNELS - 1


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box", "ellipsoid" or "cylinder" (axis along z)
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # half-widths / radii; cylinder uses size[2] as z half-length


# Lateral extents are compressed about the midline so that warped and
# shifted family members keep the arms inside the field of view.
LATERAL_SCALE = 0.85


def _prim(kind, center, size):
    cx, cy, cz = center
    sx, sy, sz = size
    return Primitive(kind, (0.5 + LATERAL_SCALE * (cx - 0.5), cy, cz), (LATERAL_SCALE * sx, sy, sz))


def _pair(kind, cx, cy, cz, sx, sy, sz, dx):
    return (_prim(kind, (0.5 - dx, cy, cz), (sx, sy, sz)), _prim(kind, (0.5 + dx, cy, cz), (sx, sy, sz)))


DEFAULT_LAYOUT: dict[str, tuple[Primitive, ...]] = {
    "legs": _pair("cylinder", None, 0.50, 0.14, 0.075, 0.075, 0.12, 0.15),
    "pelvis": _pair("box", None, 0.55, 0.34, 0.08, 0.15, 0.05, 0.18),
    "lumbar_spine": (_prim("box", (0.5, 0.68, 0.475), (0.08, 0.08, 0.065)),),
    "thoracic_spine": (_prim("box", (0.5, 0.68, 0.66), (0.08, 0.08, 0.10)),),
    "cervical_spine": (_prim("box", (0.5, 0.68, 0.84), (0.08, 0.08, 0.06)),),
    "ribcage": _pair("box", None, 0.55, 0.67, 0.05, 0.20, 0.09, 0.29),
    "arms_shoulders": _pair("box", None, 0.50, 0.67, 0.05, 0.08, 0.17, 0.425),
    "liver": (_prim("ellipsoid", (0.37, 0.40, 0.50), (0.09, 0.12, 0.05)),),
    "spleen": (_prim("ellipsoid", (0.66, 0.48, 0.50), (0.06, 0.08, 0.045)),),
    "urinary_bladder": (_prim("ellipsoid", (0.5, 0.45, 0.34), (0.07, 0.07, 0.045)),),
    "kidneys": _pair("ellipsoid", None, 0.66, 0.44, 0.06, 0.06, 0.04, 0.18),
    "spinal_canal": (_prim("cylinder", (0.5, 0.83, 0.665), (0.045, 0.045, 0.255)),),
}

BODY_LAYOUT: tuple[Primitive, ...] = (
    _prim("cylinder", (0.5, 0.55, 0.605), (0.38, 0.36, 0.325)),
    _prim("ellipsoid", (0.5, 0.55, 0.95), (0.12, 0.14, 0.05)),
    *_pair("cylinder", None, 0.50, 0.15, 0.13, 0.13, 0.15, 0.15),
    *_pair("box", None, 0.50, 0.67, 0.07, 0.10, 0.19, 0.425),
)

DEFAULT_ADC = {  # mm^2/s
    "legs": 0.40e-3,
    "pelvis": 0.50e-3,
    "lumbar_spine": 0.55e-3,
    "thoracic_spine": 0.60e-3,
    "cervical_spine": 0.65e-3,
    "ribcage": 0.45e-3,
    "arms_shoulders": 0.35e-3,
    "liver": 1.00e-3,
    "spleen": 0.80e-3,
    "urinary_bladder": 2.80e-3,
    "kidneys": 1.80e-3,
    "spinal_canal": 2.50e-3,
    "body": 1.20e-3,
}

DEFAULT_S0 = {
    "legs": 300.0,
    "pelvis": 320.0,
    "lumbar_spine": 340.0,
    "thoracic_spine": 350.0,
    "cervical_spine": 360.0,
    "ribcage": 280.0,
    "arms_shoulders": 260.0,
    "liver": 500.0,
    "spleen": 600.0,
    "urinary_bladder": 900.0,
    "kidneys": 700.0,
    "spinal_canal": 800.0,
    "body": 400.0,
}


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 192)
    spacing: tuple[float, float, float] = (2.5, 2.5, 2.5)
    adc: dict = field(default_factory=lambda: dict(DEFAULT_ADC))
    s0: dict = field(default_factory=lambda: dict(DEFAULT_S0))
    layout: dict = field(default_factory=lambda: dict(DEFAULT_LAYOUT))
    bvalues: tuple[float, ...] = (50.0, 900.0)
    # Gaussian noise sigma on signals inside the body; air stays at zero signal.
    noise_sigma: float = 0.0
    warp_amplitude: float = 4.0  # mm
    warp_wavelength: float = 300.0  # mm
    max_shift: float = 2.0  # mm, per axis, rigid shift of family members

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "bvalues", tuple(float(b) for b in self.bvalues))
        for name, val in self.adc.items():
            if not 0.2e-3 <= val <= 3.5e-3:
                raise PhantomError(f"ADC of {name} outside [0.2e-3, 3.5e-3]: {val}")
        if self.warp_wavelength <= 0 or self.warp_amplitude * 2 * np.pi / self.warp_wavelength >= 1:
            raise PhantomError("warp amplitude too large for an invertible sinusoidal warp")
        missing = set(CHANNELS[:-1]) - set(self.layout)
        if missing:
            raise PhantomError(f"layout lacks regions {sorted(missing)}")

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, (0.0, 0.0, 0.0))

    @classmethod
    def from_dict(cls, d: dict | None) -> "PhantomSpec":
        d = dict(d or {})
        unknown = set(d) - {f for f in cls.__dataclass_fields__ if f != "layout"}
        if unknown:
            raise PhantomError(f"unknown phantom keys: {sorted(unknown)}")
        if "adc" in d:
            d["adc"] = {**DEFAULT_ADC, **d["adc"]}
        if "s0" in d:
            d["s0"] = {**DEFAULT_S0, **d["s0"]}
        for key in ("dims", "spacing", "bvalues"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Warp:
    amplitude: float = 0.0
    wavelength: float = 300.0
    phases: tuple[float, float, float] = (0.0, 0.0, 0.0)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        """Base-anatomy position seen at world points ``pts`` (3, ...)."""
        k = 2 * np.pi / self.wavelength
        a, (px, py, pz) = self.amplitude, self.phases
        out = np.empty_like(pts)
        out[0] = pts[0] + a * np.sin(k * pts[2] + px) + self.shift[0]
        out[1] = pts[1] + a * np.sin(k * pts[0] + py) + self.shift[1]
        out[2] = pts[2] + a * np.sin(k * pts[1] + pz) + self.shift[2]
        return out


@dataclass(frozen=True)
class PhantomCase:
    id: str
    series: BValueSeries
    labels: np.ndarray  # int label map, BACKGROUND_LABEL outside all regions
    body: np.ndarray
    truth: ProbabilityStack
    warp: Warp

    @property
    def grid(self) -> Grid:
        return self.truth.grid

    def mask(self, region: str) -> Volume:
        return Volume(self.grid, (self.labels == CHANNELS.index(region)).astype(np.float32), "mask")

    def masks(self, regions: Sequence[str] = ATLAS_REGIONS) -> dict[str, Volume]:
        return {r: self.mask(r) for r in regions}


def _inside(prim: Primitive, u: np.ndarray) -> np.ndarray:
    d = [(u[a] - prim.center[a]) / prim.size[a] for a in range(3)]
    if prim.kind == "box":
        return (np.abs(d[0]) <= 1) & (np.abs(d[1]) <= 1) & (np.abs(d[2]) <= 1)
    if prim.kind == "ellipsoid":
        return d[0] ** 2 + d[1] ** 2 + d[2] ** 2 <= 1
    if prim.kind == "cylinder":
        return (d[0] ** 2 + d[1] ** 2 <= 1) & (np.abs(d[2]) <= 1)
    raise PhantomError(f"unknown primitive {prim.kind!r}")


def _fractions(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    extent = np.asarray(spec.dims) * np.asarray(spec.spacing)
    lo = -0.5 * np.asarray(spec.spacing)
    return (pts - lo.reshape(3, 1, 1, 1)) / extent.reshape(3, 1, 1, 1)


def label_map(spec: PhantomSpec, warp: Warp | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Integer region labels and body mask on the spec grid."""
    pts = spec.grid.world_coordinates()
    if warp is not None:
        pts = warp(pts)
    u = _fractions(spec, pts)
    labels = np.full(spec.dims, BACKGROUND_LABEL, dtype=np.int16)
    count = np.zeros(spec.dims, dtype=np.int16)
    for idx, name in enumerate(CHANNELS[:-1]):
        region = np.zeros(spec.dims, dtype=bool)
        for prim in spec.layout[name]:
            region |= _inside(prim, u)
        labels[region] = idx
        count += region
    if count.max() > 1:
        raise PhantomError("phantom regions overlap")
    body = labels != BACKGROUND_LABEL
    for prim in BODY_LAYOUT:
        body |= _inside(prim, u)
    return labels, body


def generate_phantom(spec: PhantomSpec, seed: int = 0, warp: Warp | None = None, case_id: str = "base") -> PhantomCase:
    warp = warp or Warp()
    labels, body = label_map(spec, warp)
    names = list(CHANNELS[:-1]) + ["body"]
    adc_lut = np.array([spec.adc[n] for n in names] + [0.0])
    s0_lut = np.array([spec.s0[n] for n in names] + [0.0])
    tissue = np.where(labels == BACKGROUND_LABEL, np.where(body, len(names) - 1, len(names)), labels)
    adc = adc_lut[tissue]
    s0 = s0_lut[tissue]
    rng = np.random.default_rng(seed)
    grid = spec.grid
    vols = []
    for b in spec.bvalues:
        sig = s0 * np.exp(-b * adc)
        if spec.noise_sigma > 0:
            sig = sig + body * rng.normal(0.0, spec.noise_sigma, size=sig.shape)
        vols.append(Volume(grid, sig, "signal"))
    truth = one_hot_stack(grid, labels)
    return PhantomCase(case_id, BValueSeries(spec.bvalues, tuple(vols)), labels, body, truth, warp)


def random_warp(spec: PhantomSpec, rng: np.random.Generator) -> Warp:
    return Warp(
        spec.warp_amplitude,
        spec.warp_wavelength,
        tuple(rng.uniform(0, 2 * np.pi, 3)),
        tuple(rng.uniform(-spec.max_shift, spec.max_shift, 3)),
    )


def generate_atlas_family(spec: PhantomSpec, n: int, seed: int = 0) -> list[PhantomCase]:
    """``n`` distinct warped, independently noised copies of the base anatomy."""
    if n < 1:
        raise PhantomError("family size must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        warp = random_warp(spec, rng)
        out.append(generate_phantom(spec, int(rng.integers(2**31)), warp, f"member{i + 1:02d}"))
    return out


def with_overrides(spec: PhantomSpec, **kw) -> PhantomSpec:
    return replace(spec, **kw)
