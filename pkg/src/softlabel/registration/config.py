from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class AffineConfig:
    simplex_delta: float = 0.005
    shrinks: tuple[int, ...] = (4, 2, 1)
    sigmas: tuple[float, ...] = (4.0, 2.0, 0.0)
    max_iterations: int = 200
    tolerance: float = 1e-6


@dataclass(frozen=True)
class DemonsConfig:
    learning_rate: float = 2.0
    shrinks: tuple[int, ...] = (4, 2, 1)
    smoothing_widths: tuple[float, ...] = (4.0, 2.0, 0.0)
    convergence_window: int = 20
    tolerance: float = 1e-6
    max_iterations: int = 200
    # Gaussian (voxels) applied to the accumulated velocity after each update.
    field_sigma: float = 1.0
    squaring_steps: int = 6


@dataclass(frozen=True)
class RegistrationConfig:
    affine: AffineConfig = AffineConfig()
    demons: DemonsConfig = DemonsConfig()

    def __post_init__(self):
        for name, cfg in (("affine", self.affine), ("demons", self.demons)):
            widths = cfg.sigmas if name == "affine" else cfg.smoothing_widths
            if len(cfg.shrinks) != len(widths):
                raise ValueError(f"{name}: shrink and smoothing schedules differ in length")
            if cfg.tolerance <= 0 or cfg.max_iterations <= 0:
                raise ValueError(f"{name}: tolerance and iteration cap must be positive")
            if any(s < 1 for s in cfg.shrinks) or any(w < 0 for w in widths):
                raise ValueError(f"{name}: invalid schedule")
        if self.affine.simplex_delta <= 0 or self.demons.learning_rate <= 0:
            raise ValueError("simplex delta and learning rate must be positive")
        if self.demons.convergence_window < 2:
            raise ValueError("convergence window must be at least 2")

    @classmethod
    def from_dict(cls, d: dict | None) -> "RegistrationConfig":
        d = d or {}
        aff = {k: tuple(v) if isinstance(v, list) else v for k, v in (d.get("affine") or {}).items()}
        dem = {k: tuple(v) if isinstance(v, list) else v for k, v in (d.get("demons") or {}).items()}
        unknown = set(d) - {"affine", "demons"}
        for name, sub, kind in (("affine", aff, AffineConfig), ("demons", dem, DemonsConfig)):
            unknown |= {f"{name}.{k}" for k in set(sub) - {f.name for f in fields(kind)}}
        if unknown:
            raise ValueError(f"unknown registration keys: {sorted(unknown)}")
        return cls(AffineConfig(**aff), DemonsConfig(**dem))

    def to_dict(self) -> dict:
        return asdict(self)
