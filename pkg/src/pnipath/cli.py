"""Command-line entry point: ``pnipath <command> ...``.

Failures print one JSON error record on stderr, exit with status 1 and
remove any output the failed command had created.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

from . import pipeline as pl
from .synth import CohortSpec, generate_cohort
from .tiler import PatchGridSpec

log = logging.getLogger("pnipath")

# argparse dests that name files or directories a command creates
OUTPUTS = {
    "synth": ("out",),
    "tissue-mask": ("out",),
    "rasterize": ("out",),
    "extract": ("out", "images"),
    "sample": ("out",),
    "score": ("out_dir",),
    "ensemble": ("out",),
    "stitch": ("out_heatmap", "out_mask"),
    "aggregate": ("out",),
    "evaluate": ("out_dir",),
    "pipeline": ("out",),
}

SCALAR_CONFIG = [f for f in fields(pl.PipelineConfig) if f.name not in ("classification", "segmentation")]


def _add_config_flags(p: argparse.ArgumentParser, only=None) -> None:
    p.add_argument("--config", type=Path, help="JSON config file; flags override it")
    for f in SCALAR_CONFIG:
        if only is not None and f.name not in only:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "operating_points":
            p.add_argument(flag, dest=f.name, type=float, nargs="+", default=None)
        else:
            kind = int if f.type in ("int", int) else float
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def _config(args) -> pl.PipelineConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in SCALAR_CONFIG}
    if overrides.get("operating_points") is not None:
        overrides["operating_points"] = tuple(overrides["operating_points"])
    return pl.load_config(getattr(args, "config", None), **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnipath", description="Perineural invasion detection pipeline over slide directories.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--slides-per-subject", type=int, nargs=2, default=(1, 2))
    p.add_argument("--prevalence", type=float, default=CohortSpec.subject_pni_prevalence)
    p.add_argument("--foci", type=int, nargs=2, default=(1, 2))
    p.add_argument("--focus-radius", type=int, nargs=2, default=(24, 40))
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--height", type=int, default=2048)
    p.add_argument("--mpp", type=float, default=CohortSpec.mpp)

    p = sub.add_parser("tissue-mask", help="x16 tissue mask of a slide")
    p.add_argument("--slide", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("rasterize", help="0/1/2 label mask from annotations")
    p.add_argument("--slide", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--tissue-mask", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("extract", help="grid, filter and label patches")
    p.add_argument("--slide", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--tissue-mask", type=Path, required=True)
    p.add_argument("--task", choices=("classification", "segmentation"), default="classification")
    p.add_argument("--patch-px", type=int)
    p.add_argument("--stride-px", type=int)
    p.add_argument("--min-tissue-fraction", type=float)
    p.add_argument("--no-edge-tiles", action="store_true")
    p.add_argument("--images", type=Path, help="export patches as JPEG (quality 80) here")
    p.add_argument("--out", type=Path, required=True, help="patch manifest CSV")

    p = sub.add_parser("sample", help="class-balanced sampling manifest")
    p.add_argument("--patches", type=Path, nargs="+", required=True)
    p.add_argument("--ratio", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-slides-only", action="store_true")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("score", help="oracle patch scores, one CSV per model")
    p.add_argument("--patches", type=Path, nargs="+", required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    _add_config_flags(p, {"ensemble_size", "seed", "oracle_mu_pos", "oracle_mu_neg", "oracle_sigma"})

    p = sub.add_parser("ensemble", help="soft-vote score CSVs")
    p.add_argument("--scores", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("stitch", help="heatmap and binary mask from per-pixel patch predictions")
    p.add_argument("--slide", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--predictions", type=Path, help="CSV patch_id,model_id,x,y,path (.npy grids)")
    src.add_argument("--patches", type=Path, help="segmentation patch CSV, scored by the pixel oracle")
    p.add_argument("--labels", type=Path, help="label mask for the pixel oracle")
    p.add_argument("--patch-px", type=int, default=512)
    p.add_argument("--invert", action="store_true", help="oracle predicts 1 - truth")
    p.add_argument("--out-heatmap", type=Path, required=True)
    p.add_argument("--out-mask", type=Path, required=True)
    _add_config_flags(p, {"ensemble_size", "seed", "oracle_mu_pos", "oracle_mu_neg", "pixel_sigma",
                          "binarization_threshold", "binarization_inclusive"})

    p = sub.add_parser("aggregate", help="patch -> slide -> subject max scores")
    p.add_argument("--ensemble", type=Path, required=True)
    p.add_argument("--patches", type=Path, nargs="+", required=True)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="ROC/AUC, operating points, IoU, report figures")
    p.add_argument("--aggregate", type=Path, required=True)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--segmentation", type=Path,
                   help="directory with <slide_id>/labels.png and <slide_id>/pred_mask.png")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_config_flags(p)

    p = sub.add_parser("pipeline", help="run every stage on a cohort")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    return parser


def _run(args) -> dict:
    cmd = args.command
    if cmd == "synth":
        spec = CohortSpec(seed=args.seed, n_subjects=args.n_subjects,
                          slides_per_subject=tuple(args.slides_per_subject),
                          subject_pni_prevalence=args.prevalence, foci_per_positive_slide=tuple(args.foci),
                          focus_radius_px=tuple(args.focus_radius), slide_dims=(args.width, args.height),
                          mpp=args.mpp)
        entries = generate_cohort(spec, args.out)
        return {"slides": len(entries), "positive_slides": sum(e.pni_truth for e in entries)}
    if cmd == "tissue-mask":
        tm = pl.stage_tissue_mask(args.slide, args.out)
        return {"tissue_pixels": int(tm.mask.sum())}
    if cmd == "rasterize":
        lm = pl.stage_rasterize(args.slide, args.annotations, args.tissue_mask, args.out)
        return {"pni_pixels": int(lm.pni.sum())}
    if cmd == "extract":
        make = PatchGridSpec.classification if args.task == "classification" else PatchGridSpec.segmentation
        kw = {k: v for k, v in (("patch_px", args.patch_px), ("stride_px", args.stride_px),
                                ("min_tissue_fraction", args.min_tissue_fraction)) if v is not None}
        if args.no_edge_tiles:
            kw["edge_tiles"] = False
        recs = pl.stage_extract(args.slide, args.labels, args.tissue_mask, make(**kw), args.out, args.images)
        return {"patches": len(recs), "positive": sum(r.positive for r in recs)}
    if cmd == "sample":
        m = pl.stage_sample(args.patches, args.ratio, args.seed, args.out, args.positive_slides_only)
        return m.header()
    if cmd == "score":
        cfg = _config(args)
        paths = pl.stage_score(args.patches, cfg.ensemble_size, cfg.oracle(), args.out_dir)
        return {"models": len(paths)}
    if cmd == "ensemble":
        ens = pl.stage_ensemble(args.scores, args.out)
        return {"patches": len(ens)}
    if cmd == "stitch":
        cfg = _config(args)
        if args.predictions is not None:
            preds = pl.read_prediction_manifest(args.predictions)
        else:
            if args.labels is None:
                raise ValueError("--patches needs --labels for the pixel oracle")
            from .preprocess import LabelMask
            from .tiler import read_patch_csv
            preds = pl.oracle_predictions(read_patch_csv(args.patches), LabelMask.load(args.labels),
                                          args.patch_px, cfg.ensemble_size, cfg.oracle(cfg.pixel_sigma),
                                          invert=args.invert)
        heat = pl.stage_stitch(args.slide, args.out_heatmap, args.out_mask, cfg.binarization_threshold,
                               cfg.binarization_inclusive, preds)
        return {"covered_pixels": int((heat.counts > 0).sum())}
    if cmd == "aggregate":
        rows = pl.stage_aggregate(args.ensemble, args.patches, args.cohort, args.out)
        return {"entities": len(rows)}
    if cmd == "evaluate":
        rep = pl.stage_evaluate(args.aggregate, args.cohort, _config(args), args.out_dir, args.segmentation)
        return _summary(rep)
    if cmd == "pipeline":
        rep = pl.run_pipeline(args.cohort, args.out, _config(args))
        return _summary(rep)
    raise ValueError(f"unknown command {cmd}")


def _summary(rep: dict) -> dict:
    out = {}
    for level in ("slide_level", "subject_level"):
        if "auc" in rep.get(level, {}):
            out[f"{level}_auc"] = rep[level]["auc"]
    if rep.get("segmentation"):
        out["mean_iou"] = rep["segmentation"]["mean_iou"]
    return out


def _existing_outputs(args) -> dict[Path, bool]:
    paths = [getattr(args, d, None) for d in OUTPUTS.get(args.command, ())]
    return {Path(p): Path(p).exists() for p in paths if p is not None}


def _cleanup(outputs: dict[Path, bool]) -> None:
    for path, existed in outputs.items():
        if existed or not path.exists():
            continue
        if path.is_dir():
            shutil.rmtree(path, ignore_errors=True)
        else:
            path.unlink(missing_ok=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    outputs = _existing_outputs(args)
    try:
        summary = _run(args)
    except Exception as exc:  # every failure becomes one machine-readable record
        _cleanup(outputs)
        record = {"status": "error", "command": args.command, "error": type(exc).__name__,
                  "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
