"""Stage orchestration: run directories, provenance, per-case failure handling.

Every stage writes into ``<run>/<stage>/``: its artifacts, a ``manifest.yaml``
describing the outputs for the next stage, a ``run.log`` of JSON lines and a
``provenance.json`` record (config hash, seed, versions, wall times and the
SHA-256 of every artifact).  Logs and provenance carry wall-clock times and
are therefore excluded from artifact checksums.
"""
from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import nibabel
import numpy as np
import scipy

from . import __version__
from .calibration import IsotonicModel, aggregate_curves, calibrate_stack, fit_calibration, reliability_curve
from .config import ConfigError, PipelineConfig
from .dwi import fit_monoexponential, scale_adc, scale_s0, series_from_pairs
from .fusion import AtlasSource, annotate_case
from .io import read_stack, read_volume, write_stack, write_volume
from .learner import SoftmaxClassifier, TrainingCase, predict, train
from .manifest import AtlasRecord, CaseEntry, Manifest
from .metrics import evaluate_case, truth_from_labels
from .phantom import PhantomSpec, generate_atlas_family, generate_phantom
from .registration import (
    AffineTransform,
    TransformChain,
    load_initial_alignment,
    mse_metric,
    register_affine,
    register_demons,
)
from .stack import ATLAS_REGIONS, BACKGROUND, CHANNELS, SPINAL_CANAL, ProbabilityStack
from .volume import Grid, Volume, _resample_array, resample

logger = logging.getLogger(__name__)

PROVENANCE = "provenance.json"
RUN_LOG = "run.log"
UNCHECKED = (PROVENANCE, RUN_LOG)


# -- run bookkeeping -------------------------------------------------------
def versions() -> dict:
    return {
        "softlabel": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "nibabel": nibabel.__version__,
    }


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_checksums(stage_dir) -> dict[str, str]:
    """SHA-256 of every file under ``stage_dir`` except logs and provenance."""
    root = Path(stage_dir)
    return {
        str(p.relative_to(root)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in UNCHECKED
    }


def new_run_dir(root, cfg: PipelineConfig) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    return Path(root) / f"{stamp}-{cfg.config_hash()}"


class Stage:
    """Output directory plus provenance for one stage invocation."""

    def __init__(self, run_dir, name: str, cfg: PipelineConfig, label: str | None = None):
        self.name = label or name
        self.cfg = cfg
        self.dir = Path(run_dir) / name
        if self.dir.exists() and any(self.dir.iterdir()):
            raise ConfigError(f"stage directory {self.dir} already exists; use a new run directory")
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.yaml").write_text(cfg.to_yaml())
        self.t0 = time.perf_counter()
        self.cases: list[dict] = []
        self.failures: list[str] = []
        self.extra: dict = {}

    @property
    def meta(self) -> dict:
        return {"config_hash": self.cfg.config_hash(), "stage": self.name}

    def log(self, record: dict) -> None:
        with open(self.dir / RUN_LOG, "a") as fh:
            fh.write(json.dumps({"stage": self.name, **record}, sort_keys=True) + "\n")

    def case_done(self, case_id: str, seconds: float, **extra) -> None:
        self.cases.append({"id": case_id, "status": "ok", "wall_time": seconds, **extra})
        self.log({"case": case_id, "status": "ok", "wall_time": seconds, **extra})

    def case_failed(self, case_id: str, err: str) -> None:
        logger.error("%s: case %s failed: %s", self.name, case_id, err.strip().splitlines()[-1])
        self.failures.append(case_id)
        self.cases.append({"id": case_id, "status": "failed", "error": err})
        self.log({"case": case_id, "status": "failed", "error": err})
        (self.dir / f"FAILED-{case_id}.txt").write_text(err)

    def finish(self) -> "StageResult":
        wall = time.perf_counter() - self.t0
        doc = {
            "stage": self.name,
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "versions": versions(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "wall_time": wall,
            "cases": self.cases,
            "failures": self.failures,
            "artifacts": artifact_checksums(self.dir),
            **self.extra,
        }
        (self.dir / PROVENANCE).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return StageResult(self.name, self.dir, list(self.failures), wall)


@dataclass
class StageResult:
    stage: str
    out_dir: Path
    failures: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


# -- shared helpers --------------------------------------------------------
def load_case_inputs(case: CaseEntry) -> tuple[Volume, Volume | None]:
    """ADC and S0 for a case, fitting the b-value series when needed."""
    if case.adc is not None:
        adc = read_volume(case.adc)
        s0 = read_volume(case.s0) if case.s0 is not None else None
        if s0 is None and case.dwi:
            s0 = fit_monoexponential(_series(case)).s0
        return adc, s0
    fit = fit_monoexponential(_series(case))
    return fit.adc, fit.s0


def _series(case: CaseEntry):
    return series_from_pairs([(b, read_volume(p)) for b, p in sorted(case.dwi.items())])


def read_labels(path) -> np.ndarray:
    """Integer label map (channel index per voxel) from a label volume or a stack."""
    v = read_volume(path)
    if v.data.ndim == 4:
        return np.argmax(v.data, axis=-1)
    return np.rint(v.data).astype(np.int64)


def resample_stack(stack: ProbabilityStack, target: Grid) -> ProbabilityStack:
    """Trilinear per channel; target voxels outside the source are background."""
    if stack.grid.same_as(target, tol=0.0):
        return stack
    vals, inside = _resample_array(stack.to_volume(), target, 1, 0.0)
    bg = np.zeros(len(stack.names))
    bg[stack.names.index(BACKGROUND)] = 1.0
    vals = np.where(inside[..., None], vals, bg)
    vals = vals / vals.sum(axis=-1, keepdims=True)
    return ProbabilityStack(target, vals, stack.names)


def learner_inputs(adc: Volume, s0: Volume, cfg: PipelineConfig) -> tuple[Volume, Volume]:
    """Scaled ADC and S0 on the canonical grid."""
    a, s = scale_adc(adc), scale_s0(s0)
    target = cfg.canonical_grid.target(adc.grid)
    if not target.same_as(adc.grid, tol=0.0):
        a, s = resample(a, target), resample(s, target)
    return a, s


def _error() -> str:
    return traceback.format_exc()


# -- stages ----------------------------------------------------------------
def stage_phantom(
    spec: PhantomSpec, seed: int, out_dir, cfg: PipelineConfig, family_size: int = 4, n_test: int = 1
) -> StageResult:
    """Base phantom plus a family; the last ``n_test`` members are held out.

    The base and the training members form the atlas.  Each case also gets
    its truth spinal canal as the externally supplied canal map.
    """
    if not 0 <= n_test < family_size:
        raise ConfigError("held-out count must be smaller than the family size")
    stage = Stage(Path(out_dir).parent, Path(out_dir).name, cfg, label="phantom")
    out = stage.dir
    base = generate_phantom(spec, seed)
    family = generate_atlas_family(spec, family_size, seed + 1)
    cases, atlas = [], []
    for i, c in enumerate([base] + family):
        t0 = time.perf_counter()
        d = out / c.id
        meta = {"case": c.id, "seed": seed}
        dwi = {}
        for b, v in zip(c.series.bvalues, c.series.volumes):
            p = d / f"b{int(b)}.nii"
            write_volume(v, p, meta=meta)
            dwi[b] = p
        write_volume(Volume(c.grid, c.labels.astype(np.float32), "dimensionless"), d / "truth_labels.nii", meta=meta)
        write_stack(c.truth, d / "truth_stack.nii", meta=meta)
        masks = {}
        for r in ATLAS_REGIONS:
            masks[r] = d / "masks" / f"{r}.nii"
            write_volume(c.mask(r), masks[r], meta=meta)
        canal = d / "spinal_canal.nii"
        write_volume(c.mask(SPINAL_CANAL).with_data(c.mask(SPINAL_CANAL).data, "probability"), canal, meta=meta)
        test = i > family_size - n_test
        if c.id != "base":
            cases.append(
                CaseEntry(c.id, dwi, truth=d / "truth_labels.nii", spinal_canal=canal, split="test" if test else "train")
            )
        if not test:
            adc = d / "adc.nii"
            write_volume(fit_monoexponential(c.series).adc, adc, meta=meta)
            atlas.append(AtlasRecord(c.id, adc, masks))
        stage.case_done(c.id, time.perf_counter() - t0)
    Manifest(tuple(cases), tuple(atlas)).save(out / "manifest.yaml")
    (out / "phantom_spec.json").write_text(json.dumps(_spec_dict(spec), indent=1, sort_keys=True) + "\n")
    return stage.finish()


def _spec_dict(spec: PhantomSpec) -> dict:
    return {
        "dims": list(spec.dims),
        "spacing": list(spec.spacing),
        "adc": spec.adc,
        "s0": spec.s0,
        "bvalues": list(spec.bvalues),
        "noise_sigma": spec.noise_sigma,
        "warp_amplitude": spec.warp_amplitude,
        "warp_wavelength": spec.warp_wavelength,
        "max_shift": spec.max_shift,
    }


def stage_fit(manifest: Manifest, run_dir, cfg: PipelineConfig) -> StageResult:
    stage = Stage(run_dir, "fit", cfg)
    out_cases = []
    for case in manifest.cases:
        if not case.dwi:
            out_cases.append(case)
            continue
        try:
            t0 = time.perf_counter()
            fit = fit_monoexponential(_series(case))
            secs = time.perf_counter() - t0
            adc, s0 = stage.dir / f"{case.id}_adc.nii", stage.dir / f"{case.id}_s0.nii"
            write_volume(fit.adc, adc, meta={**stage.meta, "case": case.id})
            write_volume(fit.s0, s0, meta={**stage.meta, "case": case.id})
            out_cases.append(replace(case, adc=adc, s0=s0))
            stage.case_done(case.id, secs)
        except Exception:
            stage.case_failed(case.id, _error())
            out_cases.append(case)
    replace(manifest, cases=tuple(out_cases)).save(stage.dir / "manifest.yaml")
    return stage.finish()


def stage_register(
    fixed: Volume, moving: Volume, out_chain, cfg: PipelineConfig, initial: AffineTransform | None = None
) -> dict:
    """Single pair: initial, affine, demons.  Returns MSE before and after."""
    rc = cfg.registration
    f, m = scale_adc(fixed), scale_adc(moving)
    before = mse_metric(fixed, moving, TransformChain(initial))
    aff = register_affine(f, m, cfg=rc, initial=initial)
    fld = register_demons(f, m, TransformChain(initial, aff), rc)
    chain = TransformChain(initial, aff, fld, {"affine": aff.info, "demons": fld.info})
    after = mse_metric(fixed, moving, chain)
    chain.save(out_chain)
    return {"mse_before": before, "mse_after": after}


def _atlas_sources(manifest: Manifest) -> list[AtlasSource]:
    return [
        AtlasSource(a.id, read_volume(a.adc), {r: read_volume(a.masks[r]) for r in ATLAS_REGIONS})
        for a in manifest.atlas
    ]


def _annotate_job(args):
    case, sources, atlas_records, rc, workers = args
    try:
        adc, _ = load_case_inputs(case)
        use = [s for s in sources if s.id != case.id]
        alignments = {}
        if case.alignment is not None:
            for rec in atlas_records:
                alignments[rec.id] = load_initial_alignment(case.alignment, rec.alignment)
        canal = read_volume(case.spinal_canal) if case.spinal_canal is not None else None
        t0 = time.perf_counter()
        stack, records = annotate_case(adc, use, rc, canal, alignments, workers)
        return case.id, stack, records, time.perf_counter() - t0, None
    except Exception:
        return case.id, None, [], 0.0, _error()


def stage_annotate(manifest: Manifest, run_dir, cfg: PipelineConfig) -> StageResult:
    """Registration + fusion soft labels for every case (an atlas never annotates itself)."""
    if not manifest.atlas:
        raise ConfigError("manifest has no atlas entries")
    stage = Stage(run_dir, "annotate", cfg)
    sources = _atlas_sources(manifest)
    case_workers = min(cfg.workers, len(manifest.cases))
    inner = 1 if case_workers > 1 else cfg.workers
    jobs = [(c, sources, manifest.atlas, cfg.registration, inner) for c in manifest.cases]
    if case_workers > 1:
        with ProcessPoolExecutor(max_workers=case_workers) as pool:
            results = list(pool.map(_annotate_job, jobs))
    else:
        results = [_annotate_job(j) for j in jobs]
    out_cases = []
    for case, (cid, stack, records, secs, err) in zip(manifest.cases, results):
        if err is not None:
            stage.case_failed(cid, err)
            out_cases.append(case)
            continue
        for r in records:
            stage.log({"case": cid, **r})
        path = stage.dir / "stacks" / f"{cid}.nii"
        write_stack(stack, path, meta={**stage.meta, "case": cid})
        out_cases.append(replace(case, stack=path))
        stage.case_done(cid, secs, atlas=[{k: r[k] for k in ("atlas", "mse")} for r in records])
    replace(manifest, cases=tuple(out_cases)).save(stage.dir / "manifest.yaml")
    return stage.finish()


def stage_train(manifest: Manifest, run_dir, cfg: PipelineConfig, out_model=None) -> StageResult:
    """Train on the ``train`` split using each case's soft-label stack."""
    cases = [c for c in manifest.split("train") if c.stack is not None]
    if not cases:
        raise ConfigError("no training cases with soft-label stacks in the manifest")
    stage = Stage(run_dir, "train", cfg)
    dataset = []
    for case in cases:
        adc, s0 = load_case_inputs(case)
        if s0 is None:
            raise ConfigError(f"case {case.id}: training needs S0 (dwi images or an s0 path)")
        a, s = learner_inputs(adc, s0, cfg)
        target = resample_stack(read_stack(case.stack), a.grid)
        dataset.append(TrainingCase.from_volumes(a, s, target))
    t0 = time.perf_counter()
    result = train(dataset, cfg.train_config)
    secs = time.perf_counter() - t0
    model = result.model
    model.meta = {"config_hash": cfg.config_hash()}
    path = Path(out_model) if out_model else stage.dir / "model.bin"
    model.save(path)
    if path.parent != stage.dir:
        model.save(stage.dir / "model.bin")
    lines = ["epoch\ttrain_loss\tprobe_loss"] + [
        f"{h['epoch']}\t{h['train_loss']!r}\t{h['probe_loss']!r}" for h in result.history
    ]
    (stage.dir / "history.tsv").write_text("\n".join(lines) + "\n")
    stage.extra["train_cases"] = [c.id for c in cases]
    stage.case_done("train", secs, cases=[c.id for c in cases])
    return stage.finish()


def predict_case(adc: Volume, s0: Volume, model: SoftmaxClassifier, cfg: PipelineConfig) -> ProbabilityStack:
    a, s = learner_inputs(adc, s0, cfg)
    return resample_stack(predict(a, s, model), adc.grid)


def stage_predict(manifest: Manifest, model_path, run_dir, cfg: PipelineConfig) -> StageResult:
    """Learner probability maps for every case; stacks replace the manifest ``stack`` entries."""
    if model_path is None or not Path(model_path).exists():
        raise ConfigError(f"model file not found: {model_path}")
    model = SoftmaxClassifier.load(model_path)
    stage = Stage(run_dir, "predict", cfg)
    out_cases = []
    for case in manifest.cases:
        try:
            adc, s0 = load_case_inputs(case)
            if s0 is None:
                raise ConfigError(f"case {case.id}: prediction needs S0")
            t0 = time.perf_counter()
            stack = predict_case(adc, s0, model, cfg)
            secs = time.perf_counter() - t0
            path = stage.dir / "stacks" / f"{case.id}.nii"
            write_stack(stack, path, meta={**stage.meta, "case": case.id})
            out_cases.append(replace(case, stack=path))
            stage.case_done(case.id, secs)
        except Exception:
            stage.case_failed(case.id, _error())
            out_cases.append(case)
    replace(manifest, cases=tuple(out_cases)).save(stage.dir / "manifest.yaml")
    return stage.finish()


def _reliability_rows(stacks: Sequence[ProbabilityStack], labels: Sequence[np.ndarray], bins: int) -> list[str]:
    rows = ["channel\tbin\tx_mean\tx_std\ty_mean\ty_std\tn_cases"]
    names = stacks[0].names
    for c, name in enumerate(names):
        curves = [reliability_curve(s.data[..., c], (lab == c).astype(float), bins) for s, lab in zip(stacks, labels)]
        agg = aggregate_curves(curves)
        for k in range(bins):
            vals = [agg["x_mean"][k], agg["x_std"][k], agg["y_mean"][k], agg["y_std"][k]]
            rows.append(f"{name}\t{k}\t" + "\t".join(repr(float(v)) for v in vals) + f"\t{int(agg['n_cases'][k])}")
    return rows


def stage_calibrate(
    stacks: Sequence[Path], labels: Sequence[Path], run_dir, cfg: PipelineConfig, out_model=None
) -> StageResult:
    if not stacks or len(stacks) != len(labels):
        raise ConfigError("calibrate needs equal, non-zero numbers of stacks and label maps")
    stage = Stage(run_dir, "calibrate", cfg)
    loaded = [read_stack(s) for s in stacks]
    labs = [read_labels(p) for p in labels]
    model, report = fit_calibration(list(zip(loaded, labs)))
    path = Path(out_model) if out_model else stage.dir / "calibration.json"
    model.save(path)
    if path.parent != stage.dir:
        model.save(stage.dir / "calibration.json")
    lines = ["channel\tlog_loss_before\tlog_loss_after\trelative_change"]
    for row, rel in zip(report.rows(), report.relative_change):
        lines.append(f"{row['channel']}\t{row['log_loss_before']!r}\t{row['log_loss_after']!r}\t{float(rel)!r}")
    (stage.dir / "report.tsv").write_text("\n".join(lines) + "\n")
    calibrated = [calibrate_stack(s, model) for s in loaded]
    (stage.dir / "reliability_before.tsv").write_text("\n".join(_reliability_rows(loaded, labs, cfg.calibration_bins)) + "\n")
    (stage.dir / "reliability_after.tsv").write_text(
        "\n".join(_reliability_rows(calibrated, labs, cfg.calibration_bins)) + "\n"
    )
    stage.case_done("calibrate", 0.0, cases=[str(s) for s in stacks])
    return stage.finish()


def stage_apply_calibration(manifest: Manifest, model_path, run_dir, cfg: PipelineConfig) -> StageResult:
    if model_path is None or not Path(model_path).exists():
        raise ConfigError(f"calibration model not found: {model_path}")
    model = IsotonicModel.load(model_path)
    stage = Stage(run_dir, "apply-calibration", cfg)
    out_cases = []
    for case in manifest.cases:
        if case.stack is None:
            out_cases.append(case)
            continue
        try:
            stack = calibrate_stack(read_stack(case.stack), model)
            path = stage.dir / "stacks" / f"{case.id}.nii"
            write_stack(stack, path, meta={**stage.meta, "case": case.id})
            out_cases.append(replace(case, stack=path))
            stage.case_done(case.id, 0.0)
        except Exception:
            stage.case_failed(case.id, _error())
            out_cases.append(case)
    replace(manifest, cases=tuple(out_cases)).save(stage.dir / "manifest.yaml")
    return stage.finish()


def evaluate_files(pred_stack, truth, adc: Volume, cfg: PipelineConfig, case_id: str = ""):
    stack = read_stack(pred_stack)
    labels = read_labels(truth)
    return evaluate_case(
        stack,
        truth_from_labels(labels, CHANNELS[:-1]),
        adc,
        cfg.evaluation.mode,
        cfg.evaluation.threshold,
        case_id,
    )


def stage_evaluate(manifest: Manifest, run_dir, cfg: PipelineConfig, split: str | None = "test") -> StageResult:
    """Metric reports for cases with both a stack and truth labels."""
    stage = Stage(run_dir, "evaluate", cfg)
    cases = [c for c in manifest.cases if (split is None or c.split == split) and c.stack and c.truth]
    if not cases:
        raise ConfigError("no cases with both a stack and truth labels to evaluate")
    tsv = []
    for case in cases:
        try:
            adc, _ = load_case_inputs(case)
            t0 = time.perf_counter()
            report = evaluate_files(case.stack, case.truth, adc, cfg, case.id)
            secs = time.perf_counter() - t0
            (stage.dir / f"{case.id}_report.txt").write_text(report.to_table())
            body = report.to_tsv().splitlines()
            tsv += body if not tsv else body[1:]
            stage.case_done(case.id, secs)
        except Exception:
            stage.case_failed(case.id, _error())
    (stage.dir / "report.tsv").write_text("\n".join(tsv) + "\n")
    return stage.finish()


# -- timing ----------------------------------------------------------------
@dataclass(frozen=True)
class TimingRow:
    case: str
    annotate_seconds: float
    predict_seconds: float

    @property
    def ratio(self) -> float:
        return self.annotate_seconds / self.predict_seconds if self.predict_seconds > 0 else float("inf")


def timing_report(run_dir) -> list[TimingRow]:
    """Per-case annotate (registration path) vs predict (learner path) wall time."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise FileNotFoundError(f"{run_dir}: empty or missing run directory")
    times = {}
    for stage in ("annotate", "predict"):
        prov = run_dir / stage / PROVENANCE
        if not prov.exists():
            raise FileNotFoundError(f"{prov}: missing provenance record")
        doc = json.loads(prov.read_text())
        times[stage] = {c["id"]: c["wall_time"] for c in doc["cases"] if c["status"] == "ok"}
    shared = sorted(set(times["annotate"]) & set(times["predict"]))
    return [TimingRow(c, times["annotate"][c], times["predict"][c]) for c in shared]


def format_timing(rows: Sequence[TimingRow]) -> str:
    lines = [f"{'case':<16}{'annotate_s':>12}{'predict_s':>12}{'ratio':>10}"]
    for r in rows:
        lines.append(f"{r.case:<16}{r.annotate_seconds:>12.2f}{r.predict_seconds:>12.2f}{r.ratio:>10.1f}")
    return "\n".join(lines) + "\n"


__all__ = [
    "Stage",
    "StageResult",
    "TimingRow",
    "artifact_checksums",
    "evaluate_files",
    "format_timing",
    "learner_inputs",
    "load_case_inputs",
    "new_run_dir",
    "predict_case",
    "read_labels",
    "resample_stack",
    "stage_annotate",
    "stage_apply_calibration",
    "stage_calibrate",
    "stage_evaluate",
    "stage_fit",
    "stage_phantom",
    "stage_predict",
    "stage_register",
    "stage_train",
    "timing_report",
]
