"""``softlabel`` command line: one subcommand per pipeline stage.

Exit status: 0 success, 1 at least one case failed, 2 configuration error.
Manifest-driven stages write to ``<runs-root>/<timestamp>-<confighash>/<stage>/``
unless ``--run-dir`` names an existing run.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import yaml

from .config import WORKERS_ENV, ConfigError, PipelineConfig
from .dwi import fit_monoexponential, series_from_pairs
from .io import read_volume, write_stack, write_volume
from .manifest import Manifest
from .phantom import PhantomError, PhantomSpec
from .registration import load_initial_alignment

log = logging.getLogger("softlabel")

EXIT_OK, EXIT_CASE_FAILURE, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser, manifest: bool = True) -> None:
    p.add_argument("--config", type=Path, help="pipeline config (YAML)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. training.epochs=60")
    p.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    if manifest:
        p.add_argument("--manifest", type=Path)
        p.add_argument("--run-dir", type=Path, help="existing run directory to add this stage to")
        p.add_argument("--runs-root", type=Path, default=Path("runs"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="softlabel", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic phantom family and its manifest")
    p.add_argument("--spec", type=Path, help="phantom spec (YAML mapping)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--family-size", type=int, default=4)
    p.add_argument("--held-out", type=int, default=1)
    _common(p, manifest=False)

    p = sub.add_parser("fit", help="monoexponential ADC/S0 fit")
    p.add_argument("--b", dest="bvals", action="append", default=[], metavar="B=PATH")
    p.add_argument("--out-adc", type=Path)
    p.add_argument("--out-s0", type=Path)
    _common(p)

    p = sub.add_parser("register", help="register a moving ADC map onto a fixed one")
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--init", type=Path, help="initial alignment (affine text or body-region table)")
    p.add_argument("--init-atlas", type=Path, help="atlas body-region table when --init is a table")
    p.add_argument("--out-chain", type=Path, required=True)
    _common(p, manifest=False)

    p = sub.add_parser("annotate", help="atlas registration + fusion soft labels")
    _common(p)

    p = sub.add_parser("train", help="train the voxel classifier on soft labels")
    p.add_argument("--out-model", type=Path)
    _common(p)

    p = sub.add_parser("predict", help="probability maps from a trained model")
    p.add_argument("--model", type=Path)
    p.add_argument("--adc", type=Path)
    p.add_argument("--s0", type=Path)
    p.add_argument("--out-stack", type=Path)
    _common(p)

    p = sub.add_parser("calibrate", help="fit isotonic one-vs-all calibration")
    p.add_argument("--stacks", type=Path, nargs="+", default=[])
    p.add_argument("--labels", type=Path, nargs="+", default=[])
    p.add_argument("--out-model", type=Path)
    _common(p)

    p = sub.add_parser("apply-calibration", help="apply a calibration model to stacks")
    p.add_argument("--stack", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--out-stack", type=Path)
    _common(p)

    p = sub.add_parser("evaluate", help="metrics against truth labels")
    p.add_argument("--pred-stack", type=Path)
    p.add_argument("--truth", type=Path)
    p.add_argument("--adc", type=Path)
    p.add_argument("--out-report", type=Path)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    _common(p)

    p = sub.add_parser("timing", help="annotate vs predict wall time per case")
    p.add_argument("--run-dir", type=Path, required=True)
    return ap


def _need(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise ConfigError(f"{args.command}: missing {' '.join(missing)}")


def _exists(*paths: Path) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"file not found: {p}")


def _manifest(args) -> Manifest:
    _need(args, "manifest")
    m = Manifest.load(args.manifest)
    m.check_files()
    return m


def _run_dir(args, cfg: PipelineConfig) -> Path:
    from .pipeline import new_run_dir

    return args.run_dir if args.run_dir is not None else new_run_dir(args.runs_root, cfg)


def _report(result) -> int:
    status = "ok" if not result.failures else f"{len(result.failures)} case(s) failed: {', '.join(result.failures)}"
    print(f"{result.stage}: {status} ({result.wall_time:.1f}s) -> {result.out_dir}")
    return result.exit_code


def cmd_phantom(args, cfg):
    from .pipeline import stage_phantom

    spec_dict = {}
    if args.spec is not None:
        _exists(args.spec)
        spec_dict = yaml.safe_load(args.spec.read_text()) or {}
    try:
        spec = PhantomSpec.from_dict(spec_dict)
    except (PhantomError, TypeError) as exc:
        raise ConfigError(f"phantom spec: {exc}") from exc
    return _report(stage_phantom(spec, args.seed, args.out_dir, cfg, args.family_size, args.held_out))


def cmd_fit(args, cfg):
    if args.bvals:
        _need(args, "out_adc")
        pairs = []
        for item in args.bvals:
            b, sep, path = item.partition("=")
            if not sep:
                raise ConfigError(f"--b expects B=PATH, got {item!r}")
            _exists(Path(path))
            pairs.append((float(b), read_volume(path)))
        fit = fit_monoexponential(series_from_pairs(pairs))
        write_volume(fit.adc, args.out_adc)
        if args.out_s0 is not None:
            write_volume(fit.s0, args.out_s0)
        print(f"fit: wrote {args.out_adc}")
        return EXIT_OK
    from .pipeline import stage_fit

    return _report(stage_fit(_manifest(args), _run_dir(args, cfg), cfg))


def cmd_register(args, cfg):
    from .pipeline import stage_register

    _exists(args.fixed, args.moving, args.init, args.init_atlas)
    initial = load_initial_alignment(args.init, args.init_atlas) if args.init else None
    res = stage_register(read_volume(args.fixed), read_volume(args.moving), args.out_chain, cfg, initial)
    print(f"register: MSE {res['mse_before']:.6g} -> {res['mse_after']:.6g}; wrote {args.out_chain}")
    return EXIT_OK


def cmd_annotate(args, cfg):
    from .pipeline import stage_annotate

    return _report(stage_annotate(_manifest(args), _run_dir(args, cfg), cfg))


def cmd_train(args, cfg):
    from .pipeline import stage_train

    return _report(stage_train(_manifest(args), _run_dir(args, cfg), cfg, args.out_model))


def cmd_predict(args, cfg):
    from .learner import SoftmaxClassifier
    from .pipeline import predict_case, stage_predict

    _need(args, "model")
    _exists(args.model)
    if args.manifest is None:
        _need(args, "adc", "s0", "out_stack")
        _exists(args.adc, args.s0)
        model = SoftmaxClassifier.load(args.model)
        t0 = time.perf_counter()
        stack = predict_case(read_volume(args.adc), read_volume(args.s0), model, cfg)
        write_stack(stack, args.out_stack, meta={"config_hash": cfg.config_hash()})
        print(f"predict: wrote {args.out_stack} ({time.perf_counter() - t0:.2f}s)")
        return EXIT_OK
    return _report(stage_predict(_manifest(args), args.model, _run_dir(args, cfg), cfg))


def cmd_calibrate(args, cfg):
    from .pipeline import stage_calibrate

    if args.manifest is not None:
        cases = [c for c in _manifest(args).split("train") if c.stack and c.truth]
        stacks, labels = [c.stack for c in cases], [c.truth for c in cases]
    else:
        stacks, labels = args.stacks, args.labels
        _exists(*stacks, *labels)
    return _report(stage_calibrate(stacks, labels, _run_dir(args, cfg), cfg, args.out_model))


def cmd_apply_calibration(args, cfg):
    from .calibration import IsotonicModel, calibrate_stack
    from .io import read_stack
    from .pipeline import stage_apply_calibration

    _need(args, "model")
    _exists(args.model)
    if args.manifest is None:
        _need(args, "stack", "out_stack")
        _exists(args.stack)
        out = calibrate_stack(read_stack(args.stack), IsotonicModel.load(args.model))
        write_stack(out, args.out_stack, meta={"config_hash": cfg.config_hash()})
        print(f"apply-calibration: wrote {args.out_stack}")
        return EXIT_OK
    return _report(stage_apply_calibration(_manifest(args), args.model, _run_dir(args, cfg), cfg))


def cmd_evaluate(args, cfg):
    from .pipeline import evaluate_files, stage_evaluate

    if args.manifest is None:
        _need(args, "pred_stack", "truth", "adc", "out_report")
        _exists(args.pred_stack, args.truth, args.adc)
        report = evaluate_files(args.pred_stack, args.truth, read_volume(args.adc), cfg, args.pred_stack.stem)
        args.out_report.parent.mkdir(parents=True, exist_ok=True)
        args.out_report.write_text(report.to_table())
        args.out_report.with_suffix(".tsv").write_text(report.to_tsv())
        print(report.to_table(), end="")
        return EXIT_OK
    split = None if args.split == "all" else args.split
    return _report(stage_evaluate(_manifest(args), _run_dir(args, cfg), cfg, split))


def cmd_timing(args, cfg):
    from .pipeline import format_timing, timing_report

    try:
        rows = timing_report(args.run_dir)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    print(format_timing(rows), end="")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "register": cmd_register,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "predict": cmd_predict,
    "calibrate": cmd_calibrate,
    "apply-calibration": cmd_apply_calibration,
    "evaluate": cmd_evaluate,
    "timing": cmd_timing,
}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(getattr(args, "config", None), getattr(args, "overrides", ()), getattr(args, "workers", None))
        if getattr(args, "workers", None) is not None:
            cfg = PipelineConfig.from_dict({**cfg.to_dict(), "workers": args.workers})
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"softlabel {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a case failure
        log.debug("unhandled error", exc_info=True)
        print(f"softlabel {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_CASE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
