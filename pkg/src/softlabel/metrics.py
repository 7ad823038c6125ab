"""Overlap, surface distance, biomarker differences and the Wilcoxon test."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage, stats

from .stack import ATLAS_REGIONS, BACKGROUND, FOREGROUND, ORGANS, SKELETON, ProbabilityStack
from .volume import GeometryError, Volume

logger = logging.getLogger(__name__)

UNDEFINED = float("nan")
EXACT_MAX_N = 25
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)

COMPOSITES: dict[str, tuple[str, ...]] = {
    "long_bones": ("legs", "arms_shoulders"),
    "skeleton": SKELETON,
    "internal_organs": ORGANS,
}


def is_undefined(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def _mask(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, Volume) else m).astype(bool)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, Volume) and isinstance(b, Volume) and not a.grid.same_as(b.grid):
        raise GeometryError("masks are on different grids")
    a, b = _mask(a), _mask(b)
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _check_pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def stack_to_masks(
    stack: ProbabilityStack, mode: str = "argmax", threshold: float = 0.5
) -> dict[str, np.ndarray]:
    """Binary mask per foreground channel.

    ``argmax``: each voxel goes to its largest channel, lower index first on
    ties, except that background wins any tie it is part of.
    ``threshold``: channel mask is ``P >= threshold``.
    """
    names = stack.names
    data = stack.data
    fg = [i for i, n in enumerate(names) if n != BACKGROUND]
    if mode == "threshold":
        return {names[i]: data[..., i] >= threshold for i in fg}
    if mode != "argmax":
        raise ValueError(f"unknown mode {mode!r}")
    winner = np.argmax(data, axis=-1)
    if BACKGROUND in names:
        b = names.index(BACKGROUND)
        winner = np.where(data[..., b] >= data.max(axis=-1), b, winner)
    return {names[i]: winner == i for i in fg}


def dice(a, b) -> float:
    """``2|A n B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = _check_pair(a, b)
    s = int(a.sum()) + int(b.sum())
    if s == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / s


def precision_recall(pred, truth) -> tuple[float, float]:
    c = confusion(pred, truth)
    prec = c.tp / (c.tp + c.fp) if c.tp + c.fp else UNDEFINED
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else UNDEFINED
    return prec, rec


def boundary(mask) -> np.ndarray:
    """Mask voxels with at least one six-connected neighbour outside the mask.

    Positions beyond the array edge count as outside.
    """
    m = _mask(mask)
    return m & ~ndimage.binary_erosion(m, SIX_CONNECTED, border_value=0)


def _directed_asd(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return float(dist[src].mean())


def average_surface_distance(pred, truth, spacing: Sequence[float] | None = None) -> float:
    """Symmetric ASD in mm: mean of both directed boundary-to-boundary means."""
    p, t = _check_pair(pred, truth)
    if spacing is None:
        spacing = pred.grid.spacing if isinstance(pred, Volume) else (1.0, 1.0, 1.0)
    if not p.any() or not t.any():
        return UNDEFINED
    bp, bt = boundary(p), boundary(t)
    return 0.5 * (_directed_asd(bp, bt, spacing) + _directed_asd(bt, bp, spacing))


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("median of an empty set")
    return float(v[(v.size - 1) // 2])


def relative_median_adc_diff(adc, auto, manual) -> float:
    a, m = _check_pair(auto, manual)
    values = np.asarray(adc.data if isinstance(adc, Volume) else adc)
    if not a.any() or not m.any():
        raise ValueError("relative median ADC needs non-empty masks")
    med_m = lower_median(values[m])
    if med_m == 0:
        raise ValueError("manual median ADC is zero")
    return (lower_median(values[a]) - med_m) / med_m


def mask_volume_ml(mask, spacing: Sequence[float]) -> float:
    return float(np.count_nonzero(_mask(mask))) * float(np.prod(spacing)) / 1000.0


def relative_log_volume_diff(auto, manual, spacing: Sequence[float]) -> float:
    """``(ln V_auto - ln V_manual) / ln V_manual``, volumes in mL; undefined at or below 1 mL."""
    a, m = _check_pair(auto, manual)
    va, vm = mask_volume_ml(a, spacing), mask_volume_ml(m, spacing)
    if va <= 1.0 or vm <= 1.0:
        return UNDEFINED
    return (math.log(va) - math.log(vm)) / math.log(vm)


# -- Wilcoxon --------------------------------------------------------------
def _exact_counts(ranks2: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each doubled positive-rank sum."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs: Sequence[float]) -> tuple[float, float]:
    """Signed-rank statistic ``W`` (sum of positive ranks) and two-sided p.

    Zeros are dropped and ties get mid-ranks.  Exact enumeration for up to
    25 non-zero differences, otherwise a tie- and continuity-corrected
    normal approximation.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("Wilcoxon test needs at least one pair")
    d = d[d != 0]
    if d.size == 0:
        logger.warning("all paired differences are zero; p set to 1")
        return 0.0, 1.0
    ranks = stats.rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    n = d.size
    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_counts(ranks2)
        w2 = int(round(2 * w))
        total = counts.sum()
        lower = counts[: w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        return w, float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return w, float(min(1.0, 2.0 * stats.norm.sf(z)))


# -- per-case report -------------------------------------------------------
METRIC_NAMES = ("dsc", "precision", "recall", "asd_mm", "rel_median_adc", "rel_log_volume")


@dataclass
class MetricReport:
    case: str = ""
    regions: dict[str, dict[str, float]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float]]:
        return [(r, m, v) for r, vals in self.regions.items() for m, v in vals.items()]

    def to_tsv(self) -> str:
        lines = ["case\tregion\tmetric\tvalue"]
        for r, m, v in self.rows():
            lines.append(f"{self.case}\t{r}\t{m}\t{'undefined' if is_undefined(v) else repr(float(v))}")
        for r in self.skipped:
            lines.append(f"{self.case}\t{r}\tmissing\tundefined")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'region':<18}" + "".join(f"{m:>16}" for m in METRIC_NAMES)
        lines = [f"case {self.case}", head]
        for r, vals in self.regions.items():
            cells = "".join(
                f"{'undef':>16}" if is_undefined(vals[m]) else f"{vals[m]:>16.4f}" for m in METRIC_NAMES
            )
            lines.append(f"{r:<18}{cells}")
        for r in self.skipped:
            lines.append(f"{r:<18}{'missing truth':>16}")
        return "\n".join(lines) + "\n"


def region_metrics(pred: np.ndarray, truth: np.ndarray, adc: np.ndarray, spacing) -> dict[str, float]:
    prec, rec = precision_recall(pred, truth)
    out = {
        "dsc": dice(pred, truth),
        "precision": prec,
        "recall": rec,
        "asd_mm": average_surface_distance(pred, truth, spacing),
    }
    if pred.any() and truth.any():
        try:
            out["rel_median_adc"] = relative_median_adc_diff(adc, pred, truth)
        except ValueError:
            out["rel_median_adc"] = UNDEFINED
    else:
        out["rel_median_adc"] = UNDEFINED
    out["rel_log_volume"] = relative_log_volume_diff(pred, truth, spacing)
    return out


def evaluate_case(
    stack: ProbabilityStack,
    truth: Mapping[str, np.ndarray],
    adc: Volume,
    mode: str = "argmax",
    threshold: float = 0.5,
    case: str = "",
) -> MetricReport:
    """All metrics per region and per composite region group."""
    if not stack.grid.same_as(adc.grid):
        raise GeometryError("stack and ADC grids differ")
    masks = stack_to_masks(stack, mode, threshold)
    spacing = stack.grid.spacing
    adc_data = np.asarray(adc.data, dtype=np.float64)
    report = MetricReport(case)
    for region in FOREGROUND:
        if region not in truth:
            report.skipped.append(region)
            continue
        report.regions[region] = region_metrics(masks[region], _mask(truth[region]), adc_data, spacing)
    for name, members in COMPOSITES.items():
        if any(m not in truth for m in members):
            report.skipped.append(name)
            continue
        pred = np.logical_or.reduce([masks[m] for m in members])
        tru = np.logical_or.reduce([_mask(truth[m]) for m in members])
        report.regions[name] = region_metrics(pred, tru, adc_data, spacing)
    return report


def truth_from_labels(labels: np.ndarray, names: Sequence[str] = FOREGROUND) -> dict[str, np.ndarray]:
    """Per-region boolean masks from an integer label map (channel indices)."""
    return {n: labels == i for i, n in enumerate(names)}


__all__ = [
    "ATLAS_REGIONS",
    "COMPOSITES",
    "ConfusionCounts",
    "MetricReport",
    "UNDEFINED",
    "average_surface_distance",
    "boundary",
    "confusion",
    "dice",
    "evaluate_case",
    "is_undefined",
    "lower_median",
    "precision_recall",
    "relative_log_volume_diff",
    "relative_median_adc_diff",
    "stack_to_masks",
    "truth_from_labels",
    "wilcoxon_signed_rank",
]
