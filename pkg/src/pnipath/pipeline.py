"""Pipeline configuration and file-level stages.

Every stage reads and writes the on-disk formats, and the ``pipeline``
command calls the same stage functions, so running stages one by one gives
byte-identical artifacts.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregate as agg
from . import metrics as mt
from . import scoring as sc
from . import stitcher as st
from .common import derive_seed
from .preprocess import AnnotationSet, LabelMask, TissueMask, rasterize_labels, tissue_mask
from .slide_io import open_slide
from .synth import CohortLayout, read_cohort_csv
from .tiler import PatchGridSpec, build_sampling_manifest, extract_patches, read_patch_csv, write_patch_csv

log = logging.getLogger(__name__)

WORKERS_ENV = "PNIPATH_WORKERS"


@dataclass(frozen=True)
class PipelineConfig:
    classification: PatchGridSpec = field(default_factory=PatchGridSpec.classification)
    segmentation: PatchGridSpec = field(default_factory=PatchGridSpec.segmentation)
    ensemble_size: int = 10
    binarization_threshold: int = st.DEFAULT_THRESHOLD
    binarization_inclusive: bool = True
    operating_points: tuple[float, ...] = mt.DEFAULT_OPERATING_POINTS
    positive_inclusive: bool = True
    bootstrap_n: int = 1000
    bootstrap_stratified: bool = False
    seed: int = 0
    oracle_mu_pos: float = 0.9
    oracle_mu_neg: float = 0.1
    oracle_sigma: float = 0.0
    pixel_sigma: float = 0.0
    sampling_ratio_classification: int = 2
    sampling_ratio_segmentation: int = 4
    export_patch_images: bool = False

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if not 0 <= self.binarization_threshold <= 255:
            raise ValueError("binarization_threshold must be an 8-bit value")
        if self.bootstrap_n < 1:
            raise ValueError("bootstrap_n must be >= 1")
        object.__setattr__(self, "operating_points",
                           tuple(sorted((float(t) for t in self.operating_points), reverse=True)))

    def to_json(self) -> dict:
        out = asdict(self)
        out["operating_points"] = list(self.operating_points)
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(payload)
        if "classification" in kw:
            kw["classification"] = PatchGridSpec.classification(**kw["classification"])
        if "segmentation" in kw:
            kw["segmentation"] = PatchGridSpec.segmentation(**kw["segmentation"])
        if "operating_points" in kw:
            kw["operating_points"] = tuple(kw["operating_points"])
        return cls(**kw)

    def merged(self, **overrides) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def oracle(self, sigma: float | None = None) -> sc.OracleScorerConfig:
        return sc.OracleScorerConfig(self.oracle_mu_pos, self.oracle_mu_neg,
                                     self.oracle_sigma if sigma is None else sigma, self.seed)

    def stream_seed(self, name: str) -> int:
        return int(derive_seed(self.seed, name).generate_state(1)[0])

    def seeds(self) -> dict:
        return {"root": self.seed,
                **{name: self.stream_seed(name) for name in
                   ("sampling-cls", "sampling-seg", "bootstrap-slide", "bootstrap-subject",
                    "bootstrap-iou")}}


def load_config(path=None, **overrides) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        cfg = PipelineConfig.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    return cfg.merged(**overrides)


def dump_json(payload, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n",
                          encoding="utf-8")


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ---- per-slide stages -------------------------------------------------------

def stage_tissue_mask(slide_dir, out_png) -> TissueMask:
    tm = tissue_mask(open_slide(slide_dir))
    tm.save(out_png)
    return tm


def stage_rasterize(slide_dir, annotations_json, tissue_png, out_png) -> LabelMask:
    slide = open_slide(slide_dir)
    ann = AnnotationSet.load(annotations_json)
    lm = rasterize_labels(slide, ann, TissueMask.load(tissue_png, slide.slide_id))
    lm.save(out_png)
    return lm


def stage_extract(slide_dir, labels_png, tissue_png, spec: PatchGridSpec, out_csv, image_dir=None):
    slide = open_slide(slide_dir)
    records = extract_patches(slide, LabelMask.load(labels_png, slide.slide_id),
                              TissueMask.load(tissue_png, slide.slide_id), spec, out_dir=image_dir)
    write_patch_csv(records, out_csv)
    return records


def read_patches(paths: Sequence) -> list:
    records = [r for p in paths for r in read_patch_csv(p)]
    ids = [r.patch_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("patch ids repeat across patch files")
    return sorted(records, key=lambda r: r.patch_id)


def stage_sample(patch_csvs, ratio: int, seed: int, out_txt, positive_slides_only: bool = False):
    records = read_patches(patch_csvs)
    if positive_slides_only:
        pos_slides = {r.slide_id for r in records if r.positive}
        records = [r for r in records if r.slide_id in pos_slides]
    manifest = build_sampling_manifest(records, ratio, seed)
    manifest.save(out_txt)
    return manifest


def stage_score(patch_csvs, n_models: int, oracle: sc.OracleScorerConfig, out_dir) -> list[Path]:
    records = read_patches(patch_csvs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for mid in sc.model_ids(n_models):
        path = out_dir / f"{mid}.csv"
        sc.oracle_score(records, oracle, model_id=mid).to_csv(path)
        paths.append(path)
    return paths


def stage_ensemble(score_csvs, out_csv) -> sc.ScoreTable:
    tables = [sc.ingest_external(p) for p in score_csvs]
    ens = sc.soft_vote(tables)
    ens.to_csv(out_csv)
    return ens


def oracle_predictions(records, labels: LabelMask, patch_px: int, n_models: int,
                       oracle: sc.OracleScorerConfig, invert: bool = False):
    pni = labels.pni
    for mid in sc.model_ids(n_models):
        for r in records:
            truth = pni[r.y:r.y + patch_px, r.x:r.x + patch_px]
            yield st.PixelPredictionPatch(
                r.patch_id, r.x, r.y,
                sc.oracle_pixel_probabilities(truth, oracle, mid, r.patch_id, invert), mid)


def read_prediction_manifest(path):
    """External per-pixel predictions: CSV ``patch_id,model_id,x,y,path`` with .npy grids."""
    import csv

    base = Path(path).parent
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != ("patch_id", "model_id", "x", "y", "path"):
            raise ValueError(f"{path}: expected header patch_id,model_id,x,y,path")
        for row in rd:
            grid = np.load(base / row["path"])
            yield st.PixelPredictionPatch(row["patch_id"], int(row["x"]), int(row["y"]), grid,
                                          row["model_id"])


def stage_stitch(slide_dir, out_heatmap, out_mask, threshold: int = st.DEFAULT_THRESHOLD,
                 inclusive: bool = True, predictions=None) -> st.Heatmap:
    slide = open_slide(slide_dir)
    heat = st.stitch(predictions, slide.meta.dimensions)
    q = st.quantize(heat)
    st.save_gray(q, out_heatmap)
    st.save_binary(st.binarize(q, threshold, inclusive), out_mask)
    return heat


def stage_aggregate(ensemble_csv, patch_csvs, cohort_csv, out_csv) -> list[agg.EntityScore]:
    ens = sc.ingest_external(ensemble_csv)
    records = read_patches(patch_csvs)
    cohort = read_cohort_csv(cohort_csv)
    slides = agg.slide_scores(ens, records, [e.slide_id for e in cohort])
    subjects = agg.subject_scores(slides, {e.slide_id: e.subject_id for e in cohort})
    rows = list(slides.values()) + list(subjects.values())
    agg.write_aggregate_csv(rows, out_csv)
    return rows


# ---- evaluation -------------------------------------------------------------

def _labeled(scores: list[agg.EntityScore], level: str, truth: dict[str, bool]) -> list[mt.LabeledScore]:
    out = []
    for s in scores:
        if s.level != level:
            continue
        if s.entity_id not in truth:
            raise ValueError(f"no ground truth for {level} {s.entity_id}")
        out.append(mt.LabeledScore(s.entity_id, s.score, truth[s.entity_id]))
    return sorted(out, key=lambda r: r.entity_id)


def core_ious(seg_dir, positive_slides: Sequence[str]) -> dict[str, float]:
    seg_dir = Path(seg_dir)
    ious = {}
    for sid in sorted(positive_slides):
        truth = LabelMask.load(seg_dir / sid / "labels.png", sid).pni
        if not truth.any():
            log.warning("slide %s is PNI positive but has no annotated pixels; skipped", sid)
            continue
        pred = st.load_binary(seg_dir / sid / "pred_mask.png")
        ious[sid] = mt.core_iou(pred, truth)
    return ious


def stage_evaluate(aggregate_csv, cohort_csv, config: PipelineConfig, out_dir, seg_dir=None) -> dict:
    from . import plotting

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cohort = read_cohort_csv(cohort_csv)
    slide_truth = {e.slide_id: e.pni_truth for e in cohort}
    subject_truth: dict[str, bool] = {}
    for e in cohort:
        subject_truth[e.subject_id] = subject_truth.get(e.subject_id, False) or e.pni_truth
    scores = agg.read_aggregate_csv(aggregate_csv)
    seeds = config.seeds()

    report = {"config": config.to_json(), "seeds": seeds,
              "bootstrap": {"n": config.bootstrap_n, "method": "percentile", "confidence": 0.95,
                            "stratified": config.bootstrap_stratified},
              "no_evidence_slides": sorted(s.entity_id for s in scores
                                           if s.level == "slide" and s.no_evidence)}
    curves = {}
    for level, truth, seed_name in (("slide", slide_truth, "bootstrap-slide"),
                                    ("subject", subject_truth, "bootstrap-subject")):
        labeled = _labeled(scores, level, truth)
        try:
            report[f"{level}_level"] = mt.classification_metrics(
                labeled, config.operating_points, config.bootstrap_n, seeds[seed_name],
                config.positive_inclusive, config.bootstrap_stratified)
        except mt.MetricsError as exc:
            report[f"{level}_level"] = {"error": str(exc)}
            continue
        roc = mt.roc_auc(labeled)
        roc.to_csv(out_dir / f"roc_{level}.csv")
        curves[level] = roc

    report["segmentation"] = None
    if seg_dir is not None:
        ious = core_ious(seg_dir, [sid for sid, t in slide_truth.items() if t])
        if ious:
            report["segmentation"] = mt.segmentation_metrics(ious, config.bootstrap_n,
                                                             seeds["bootstrap-iou"])
            plotting.render_overlays(seg_dir, sorted(ious), ious, out_dir / "overlays")
    if curves:
        plotting.roc_figure(curves, report, out_dir / "roc.png")
    dump_json(report, out_dir / "metrics.json")
    return report


# ---- whole pipeline ---------------------------------------------------------

@dataclass(frozen=True)
class RunLayout:
    root: Path

    def slide(self, sid: str) -> Path:
        return self.root / "slides" / sid

    @property
    def scores(self) -> Path:
        return self.root / "scores"

    @property
    def report(self) -> Path:
        return self.root / "report"


def _prepare_slide(cfg: PipelineConfig, cohort: CohortLayout, run: RunLayout, sid: str) -> None:
    d = run.slide(sid)
    d.mkdir(parents=True, exist_ok=True)
    sdir = cohort.slide_dir(sid)
    stage_tissue_mask(sdir, d / "tissue_mask.png")
    stage_rasterize(sdir, cohort.annotations(sid), d / "tissue_mask.png", d / "labels.png")
    for spec, name in ((cfg.classification, "cls"), (cfg.segmentation, "seg")):
        stage_extract(sdir, d / "labels.png", d / "tissue_mask.png", spec, d / f"patches_{name}.csv",
                      image_dir=(d / f"patches_{name}") if cfg.export_patch_images else None)
    records = read_patch_csv(d / "patches_seg.csv")
    labels = LabelMask.load(d / "labels.png", sid)
    preds = oracle_predictions(records, labels, cfg.segmentation.patch_px, cfg.ensemble_size,
                               cfg.oracle(cfg.pixel_sigma))
    stage_stitch(sdir, d / "heatmap.png", d / "pred_mask.png", cfg.binarization_threshold,
                 cfg.binarization_inclusive, preds)


def run_pipeline(cohort_dir, out_dir, cfg: PipelineConfig) -> dict:
    cohort = CohortLayout(Path(cohort_dir))
    run = RunLayout(Path(out_dir))
    run.root.mkdir(parents=True, exist_ok=True)
    dump_json(cfg.to_json(), run.root / "config.json")
    entries = read_cohort_csv(cohort.cohort_csv)
    sids = [e.slide_id for e in entries]

    n = workers()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            list(pool.map(lambda s: _prepare_slide(cfg, cohort, run, s), sids))
    else:
        for sid in sids:
            _prepare_slide(cfg, cohort, run, sid)

    cls_csvs = [run.slide(s) / "patches_cls.csv" for s in sids]
    seg_csvs = [run.slide(s) / "patches_seg.csv" for s in sids]
    for csvs, ratio, name, pos_only in ((cls_csvs, cfg.sampling_ratio_classification, "cls", False),
                                        (seg_csvs, cfg.sampling_ratio_segmentation, "seg", True)):
        try:
            stage_sample(csvs, ratio, cfg.stream_seed(f"sampling-{name}"),
                         run.root / f"manifest_{name}.txt", positive_slides_only=pos_only)
        except ValueError as exc:
            log.warning("no %s sampling manifest: %s", name, exc)

    score_paths = stage_score(cls_csvs, cfg.ensemble_size, cfg.oracle(), run.scores)
    stage_ensemble(score_paths, run.root / "ensemble.csv")
    stage_aggregate(run.root / "ensemble.csv", cls_csvs, cohort.cohort_csv, run.root / "aggregate.csv")
    return stage_evaluate(run.root / "aggregate.csv", cohort.cohort_csv, cfg, run.report,
                          seg_dir=run.root / "slides")
