"""``brainshift`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs), 2 data
error (unreadable or inconsistent data, failed optimization).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import classify, nifti
from .align import RigidTransform, align_symmetry, apply_rigid
from .biomarkers import midline_shift_mm, read_records, record_from_field, write_records
from .config import ConfigError, PipelineConfig, load_config, weights_from_json
from .fileio import atomic_write
from .phantom import PhantomSpec, generate_cohort, make_case
from .synthesis import DivergenceError, optimize_velocity, write_trace
from .volume import GridMismatchError, MaskVolume, ScalarVolume

log = logging.getLogger("brainshift")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON (unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="override the classify seed / phantom seed")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brainshift", description="pseudo-healthy synthesis and deformation biomarkers")
    parser.add_argument("--dump-config", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic phantom case (or a biomarker cohort)")
    p.add_argument("--spec", help="PhantomSpec JSON")
    p.add_argument("--out", "--out-dir", dest="out", required=False, help="output directory")
    p.add_argument("--cohort", type=int, help="write cohort.csv with this many cases instead of one case")
    _common(p)

    p = sub.add_parser("align", help="rigid mid-sagittal alignment")
    p.add_argument("--in", dest="inp", help="input volume (.nii)")
    p.add_argument("--out", help="aligned volume (.nii)")
    p.add_argument("--masks", help="label map to resample with the same transform")
    p.add_argument("--out-masks", help="where to write the resampled label map")
    p.add_argument("--report", help="transform JSON (default: <out>.json)")
    _common(p)

    p = sub.add_parser("synth", help="pseudo-healthy synthesis by velocity optimization")
    p.add_argument("--in", dest="inp", help="aligned volume (.nii)")
    p.add_argument("--masks", help="label map (.nii)")
    p.add_argument("--weights", help="LossWeights JSON")
    p.add_argument("--out-field", help="deformation field (.nii, 4-D)")
    p.add_argument("--out-image", help="pseudo-healthy volume (.nii)")
    p.add_argument("--out", help="warped label map (.nii)")
    p.add_argument("--report", help="loss trace CSV")
    _common(p)

    p = sub.add_parser("biomarkers", help="deformation biomarkers from a field and label map")
    p.add_argument("--in", dest="inp", help="deformation field (.nii, 4-D)")
    p.add_argument("--masks", help="label map of the diseased scan (.nii)")
    p.add_argument("--out", help="biomarker CSV")
    p.add_argument("--id", default="case", help="record id")
    p.add_argument("--surgery", type=int, choices=(0, 1), default=0, help="surgery label for the record")
    p.add_argument("--mls", type=float, help="midline shift in mm (default: ventricle-centroid estimate)")
    _common(p)

    for name, text in (("classify", "cross-validated AUCs"), ("report", "AUCs plus ROC point CSVs and SVG plots")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--in", dest="inp", help="biomarker CSV")
        p.add_argument("--out", help="output directory")
        _common(p)
    return parser


def _need(args, *names: str) -> None:
    for n in names:
        val = getattr(args, n)
        flag = "--in" if n == "inp" else "--" + n.replace("_", "-")
        if val is None:
            raise UsageError(f"{args.command}: {flag} is required")
        if n in ("inp", "masks", "spec", "weights") and not Path(val).is_file():
            raise UsageError(f"{args.command}: {flag} {val}: no such file")


def _config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise UsageError(f"--config {args.config}: no such file")
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, classify=replace(cfg.classify, seed=args.seed))
    return cfg


def _threads() -> None:
    raw = os.environ.get("BRAINSHIFT_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"BRAINSHIFT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"BRAINSHIFT_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def cmd_phantom(args, cfg: PipelineConfig) -> None:
    _need(args, "out")
    spec = PhantomSpec()
    if args.spec:
        _need(args, "spec")
        with open(args.spec, encoding="utf-8") as fh:
            data = json.load(fh)
        allowed = set(asdict(spec))
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"phantom spec: unknown key(s) {sorted(unknown)}")
        spec = PhantomSpec(**data)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cohort is not None:
        members = generate_cohort(args.cohort, seed=spec.seed, grid=spec.grid, spacing=spec.spacing)
        write_records([m.record for m in members], out / "cohort.csv")
        return
    spec.validate()
    case = make_case(spec)
    nifti.write_nifti(case.volume, out / "volume.nii")
    nifti.write_labels(case.masks, out / "labels.nii")
    nifti.write_field(case.ground_truth_field, out / "gt_field.nii")
    meta = {"spec": asdict(spec), "laterality": case.laterality, "thickness": case.thickness}
    atomic_write(out / "case.json", json.dumps(meta, indent=2) + "\n")


def cmd_align(args, cfg: PipelineConfig) -> None:
    _need(args, "inp", "out")
    vol = nifti.read_nifti(args.inp)
    res = align_symmetry(vol, cfg.align)
    nifti.write_nifti(res.aligned, args.out)
    if args.masks:
        _need(args, "masks", "out_masks")
        masks = nifti.read_labels(args.masks)
        if masks.dims != vol.dims:
            raise GridMismatchError(f"labels {masks.dims} vs volume {vol.dims}")
        nifti.write_labels(_rigid_masks(masks, res.transform), args.out_masks)
    report = args.report or str(args.out) + ".json"
    payload = {"transform": res.transform.to_dict(), "loss_initial": res.trace[0],
               "loss_best": min(res.trace), "best_iteration": res.best_iteration}
    atomic_write(report, json.dumps(payload, indent=2) + "\n")


def _rigid_masks(masks: MaskVolume, T: RigidTransform) -> MaskVolume:
    chans = [apply_rigid(ScalarVolume(c, masks.spacing), T).data for c in masks.data]
    return MaskVolume(np.clip(np.stack(chans), 0.0, 1.0), masks.spacing, masks.classes)


def cmd_synth(args, cfg: PipelineConfig) -> None:
    _need(args, "inp", "masks")
    if not (args.out_field or args.out_image or args.report or args.out):
        raise UsageError("synth: give at least one of --out-field, --out-image, --report, --out")
    synth_cfg = cfg.synth
    if args.weights:
        _need(args, "weights")
        with open(args.weights, encoding="utf-8") as fh:
            synth_cfg = replace(synth_cfg, weights=weights_from_json(fh.read()))
    vol = nifti.read_nifti(args.inp)
    masks = nifti.read_labels(args.masks)
    if masks.dims != vol.dims:
        raise GridMismatchError(f"labels {masks.dims} vs volume {vol.dims}")
    res = optimize_velocity(vol, masks, cfg=synth_cfg)
    if args.out_field:
        nifti.write_field(res.deformation, args.out_field)
    if args.out_image:
        nifti.write_nifti(res.pseudo_healthy, args.out_image)
    if args.out:
        nifti.write_labels(res.warped_masks, args.out)
    if args.report:
        write_trace(args.report, res.trace)
    if res.hematoma_reduction is not None:
        log.info("hematoma reduction %.3f", res.hematoma_reduction)


def cmd_biomarkers(args, cfg: PipelineConfig) -> None:
    _need(args, "inp", "masks", "out")
    fld = nifti.read_field(args.inp)
    masks = nifti.read_labels(args.masks)
    if masks.dims != fld.dims:
        raise GridMismatchError(f"labels {masks.dims} vs field {fld.dims}")
    mls = args.mls if args.mls is not None else round(midline_shift_mm(masks), 6)
    rec = record_from_field(args.id, fld, masks, bool(args.surgery), mls,
                            cfg.classify.bilateral_threshold)
    write_records([rec], args.out)


def cmd_classify(args, cfg: PipelineConfig, plots: bool = False) -> None:
    _need(args, "inp", "out")
    records = read_records(args.inp)
    report = classify.evaluate(records, k=cfg.classify.k, seed=cfg.classify.seed)
    out = Path(args.out)
    if plots:
        classify.write_report(report, out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "auc_report.csv", classify.auc_report_csv(report))
    for r in report.results:
        print(f"{r.feature_set:>13s} {r.subgroup:>10s} mean AUC {r.mean_auc:.3f}")


COMMANDS = {
    "phantom": cmd_phantom,
    "align": cmd_align,
    "synth": cmd_synth,
    "biomarkers": cmd_biomarkers,
    "classify": cmd_classify,
    "report": lambda a, c: cmd_classify(a, c, plots=True),
}

DATA_ERRORS = (ValueError, OSError, DivergenceError, FloatingPointError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _threads()
        if args.command is None and not args.dump_config:
            raise UsageError(parser.format_usage().strip())
        cfg = _config(args) if args.command else PipelineConfig()
        if args.dump_config:
            sys.stdout.write(cfg.to_json())
            return EXIT_OK
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as err:
        print(str(err), file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
