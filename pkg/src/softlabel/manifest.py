"""Dataset manifest: cases to process and atlas entries, paths relative to the file.

Example::

    cases:
      - id: member01
        dwi: {50: member01/b50.nii, 900: member01/b900.nii}
        truth: member01/truth_labels.nii      # integer channel index per voxel
        spinal_canal: member01/spinal_canal.nii
        split: train                          # or test
    atlas:
      - id: base
        adc: base/adc.nii
        masks: {legs: base/masks/legs.nii, ...}
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import yaml

from .config import ConfigError
from .stack import ATLAS_REGIONS

CASE_KEYS = {"id", "dwi", "adc", "s0", "truth", "alignment", "spinal_canal", "stack", "split"}
ATLAS_KEYS = {"id", "adc", "masks", "alignment"}
SPLITS = ("train", "test")


@dataclass(frozen=True)
class CaseEntry:
    id: str
    dwi: Mapping[float, Path] = field(default_factory=dict)
    adc: Path | None = None
    s0: Path | None = None
    truth: Path | None = None
    alignment: Path | None = None
    spinal_canal: Path | None = None
    stack: Path | None = None
    split: str = "train"

    def paths(self) -> list[Path]:
        out = list(self.dwi.values())
        out += [p for p in (self.adc, self.s0, self.truth, self.alignment, self.spinal_canal, self.stack) if p]
        return out


@dataclass(frozen=True)
class AtlasRecord:
    id: str
    adc: Path
    masks: Mapping[str, Path]
    alignment: Path | None = None

    def paths(self) -> list[Path]:
        return [self.adc, *self.masks.values(), *([self.alignment] if self.alignment else [])]


@dataclass(frozen=True)
class Manifest:
    cases: tuple[CaseEntry, ...]
    atlas: tuple[AtlasRecord, ...] = ()

    def __post_init__(self):
        for kind, items in (("case", self.cases), ("atlas", self.atlas)):
            ids = [x.id for x in items]
            dup = sorted({i for i in ids if ids.count(i) > 1})
            if dup:
                raise ConfigError(f"duplicate {kind} ids: {dup}")
        for c in self.cases:
            if c.split not in SPLITS:
                raise ConfigError(f"case {c.id}: split must be one of {SPLITS}")
            if not c.dwi and c.adc is None:
                raise ConfigError(f"case {c.id}: needs dwi images or a precomputed adc")
        for a in self.atlas:
            missing = set(ATLAS_REGIONS) - set(a.masks)
            if missing:
                raise ConfigError(f"atlas {a.id}: missing masks {sorted(missing)}")

    def case(self, case_id: str) -> CaseEntry:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def split(self, name: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == name]

    def check_files(self) -> None:
        missing = [str(p) for c in self.cases for p in c.paths() if not p.exists()]
        missing += [str(p) for a in self.atlas for p in a.paths() if not p.exists()]
        if missing:
            raise ConfigError(f"manifest references missing files: {missing[:5]}")

    def with_case(self, case: CaseEntry) -> "Manifest":
        return replace(self, cases=tuple(case if c.id == case.id else c for c in self.cases))

    # -- persistence ------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, root: Path) -> "Manifest":
        if not isinstance(d, dict):
            raise ConfigError("manifest must be a mapping")
        unknown = set(d) - {"cases", "atlas"}
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")

        def p(v):
            return None if v is None else (root / str(v)).resolve()

        cases = []
        for raw in d.get("cases") or []:
            bad = set(raw) - CASE_KEYS
            if bad or "id" not in raw:
                raise ConfigError(f"bad case entry {raw.get('id', '?')}: unknown keys {sorted(bad)}")
            dwi = {float(b): p(v) for b, v in (raw.get("dwi") or {}).items()}
            cases.append(
                CaseEntry(
                    str(raw["id"]),
                    dwi,
                    **{k: p(raw.get(k)) for k in ("adc", "s0", "truth", "alignment", "spinal_canal", "stack")},
                    split=str(raw.get("split", "train")),
                )
            )
        atlas = []
        for raw in d.get("atlas") or []:
            bad = set(raw) - ATLAS_KEYS
            if bad or "id" not in raw or "adc" not in raw:
                raise ConfigError(f"bad atlas entry {raw.get('id', '?')}: unknown keys {sorted(bad)}")
            masks = {str(k): p(v) for k, v in (raw.get("masks") or {}).items()}
            atlas.append(AtlasRecord(str(raw["id"]), p(raw["adc"]), masks, p(raw.get("alignment"))))
        return cls(tuple(cases), tuple(atlas))

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            d = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_dict(d, path.parent.resolve())

    def to_dict(self, root: Path) -> dict:
        def rel(v):
            return None if v is None else os.path.relpath(v, root)

        cases = []
        for c in self.cases:
            d = {"id": c.id, "split": c.split}
            if c.dwi:
                d["dwi"] = {_bkey(b): rel(v) for b, v in c.dwi.items()}
            for k in ("adc", "s0", "truth", "alignment", "spinal_canal", "stack"):
                if getattr(c, k) is not None:
                    d[k] = rel(getattr(c, k))
            cases.append(d)
        atlas = []
        for a in self.atlas:
            d = {"id": a.id, "adc": rel(a.adc), "masks": {k: rel(v) for k, v in a.masks.items()}}
            if a.alignment is not None:
                d["alignment"] = rel(a.alignment)
            atlas.append(d)
        return {"cases": cases, "atlas": atlas}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(path.parent.resolve()), sort_keys=False))


def _bkey(b: float):
    return int(b) if float(b).is_integer() else float(b)
