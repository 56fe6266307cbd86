"""One self-training stage: score, curate, build databases, mix, evaluate.

Detector training happens elsewhere; this stage consumes the prediction
files an external trainer left behind and produces everything the next
training round needs. All artifacts land under

    <output_root>/stage_<k>/
        config.snapshot          canonical config text (hashed)
        dataset_manifest.txt
        databases/instances/     patch database
        databases/backgrounds/   background index
        mixed/                   synthesized epoch
        metrics_report.txt
        stage_manifest.txt

A rerun over identical inputs rewrites identical bytes. On failure the
partially-written stage directory is removed.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

from .config import PipelineConfig, canonical_text, config_hash
from .curation import apply_filters, build_background_database, build_instance_database
from .errors import KittimixError, MissingPredictions
from .evaluation import EvalConfig, ap40, pseudo_label_pr, write_eval_report
from .kitti_io import DatasetManifest, save_manifest, scan_dataset
from .synthesis import generate_epoch
from .uncertainty import load_ensemble_predictions, score_frame

logger = logging.getLogger(__name__)

STAGE_MANIFEST_HEADER = "kittimix-stage-manifest v1"


@dataclass
class StageManifest:
    stage_index: int
    config_hash: str
    prediction_dirs: list[Path]
    dataset_manifest: Path
    instance_db: Path
    background_db: Path
    mixed_dir: Path
    metrics_report: Path
    path: Path | None = None


def stage_dir_for(cfg: PipelineConfig, stage_index: int) -> Path:
    return cfg.output_root / f"stage_{stage_index}"


def scan_from_config(cfg: PipelineConfig) -> DatasetManifest:
    return scan_dataset(
        cfg.label_dir, cfg.unlabeled_image_dir, cfg.labeled_image_dir,
        cfg.calib_dir, exclude=cfg.exclude,
    )


def check_predictions(frames, model_dirs) -> None:
    """Every frame needs a prediction file from every model; an absent file
    is an error, not an empty detection set."""
    for model_index, directory in enumerate(model_dirs):
        if not Path(directory).is_dir():
            raise MissingPredictions(model_index, [f"<missing dir {directory}>"])
        absent = [
            f.frame_id for f in frames
            if not (Path(directory) / f"{f.frame_id}.txt").is_file()
        ]
        if absent:
            raise MissingPredictions(model_index, absent)


def _score_frames(frames, model_dirs, unc_cfg):
    predictions = {}
    scored = {}
    for frame in frames:
        preds = load_ensemble_predictions(frame.frame_id, model_dirs)
        predictions[frame.frame_id] = preds
        scored[frame.frame_id] = score_frame(preds, unc_cfg)
    return predictions, scored


def _evaluate(cfg: PipelineConfig, manifest, model_dirs, unc_cfg, cur_cfg, report_path):
    evaluable = [
        f for f in manifest.labeled
        if all((Path(d) / f"{f.frame_id}.txt").is_file() for d in model_dirs)
    ]
    lines = [f"frames_evaluated {len(evaluable)}"]
    if evaluable:
        _, scored = _score_frames(evaluable, model_dirs, unc_cfg)
        rep_frames = []
        flt_frames = []
        for frame in evaluable:
            pairs = scored[frame.frame_id]
            rep_frames.append(([b for b, _ in pairs], frame.labels))
            flt_frames.append(([b for b, _ in apply_filters(pairs, cur_cfg)], frame.labels))
        for category in cfg.eval_categories:
            eval_cfg = EvalConfig(iou_thr=cfg.eval_iou_thr, category=category, bev=cfg.eval_bev)
            value = ap40(rep_frames, eval_cfg)
            lines.append(f"ap40 category={category} iou_thr={cfg.eval_iou_thr!r} value={value!r}")
        pr = pseudo_label_pr(flt_frames, cfg.eval_iou_thr, bev=cfg.eval_bev)
        lines.append(
            f"pseudo_pr precision={pr.precision!r} recall={pr.recall!r} "
            f"tp={pr.true_positives} n_pseudo={pr.n_predicted} n_gt={pr.n_ground_truth}"
        )
    write_eval_report(lines, report_path)


def run_stage(cfg: PipelineConfig, stage_index: int, workers: int | None = None) -> StageManifest:
    """Run one full data-side stage; see the module docstring for outputs.

    The mixing epoch seeds from pipeline.master_seed exactly like the
    standalone mix subcommand; stages differ through their prediction
    inputs, not their seeds.
    """
    if not 1 <= stage_index <= cfg.stage_count:
        raise KittimixError(f"stage {stage_index} outside 1..{cfg.stage_count}")
    model_dirs = cfg.model_dirs_for_stage(stage_index)
    stage_dir = stage_dir_for(cfg, stage_index)
    if stage_dir.exists():
        shutil.rmtree(stage_dir)
    stage_dir.mkdir(parents=True)
    try:
        return _run_stage_inner(cfg, stage_index, model_dirs, stage_dir, workers)
    except BaseException:
        shutil.rmtree(stage_dir, ignore_errors=True)
        raise


def _run_stage_inner(cfg, stage_index, model_dirs, stage_dir, workers) -> StageManifest:
    unc_cfg = cfg.uncertainty_for_stage(stage_index)
    cur_cfg = cfg.curation_for_stage(stage_index)

    snapshot = canonical_text(cfg)
    (stage_dir / "config.snapshot").write_text(snapshot, encoding="utf-8")

    manifest = scan_from_config(cfg)
    manifest_path = stage_dir / "dataset_manifest.txt"
    save_manifest(manifest, manifest_path)

    check_predictions(manifest.unlabeled, model_dirs)
    predictions, scored = _score_frames(manifest.unlabeled, model_dirs, unc_cfg)

    instance_dir = stage_dir / "databases" / "instances"
    background_dir = stage_dir / "databases" / "backgrounds"
    instance_db = build_instance_database(manifest, scored, cur_cfg, instance_dir)
    filtered = {fid: apply_filters(pairs, cur_cfg) for fid, pairs in scored.items()}
    background_db = build_background_database(
        manifest, predictions, background_dir, cfg=cur_cfg, filtered_by_frame=filtered)
    logger.info(
        "stage %d: %d instance records, %d background frames",
        stage_index, len(instance_db.records), len(background_db.records),
    )

    mixed_dir = stage_dir / "mixed"
    generate_epoch(
        manifest, instance_db, background_db, cfg.mix, cfg.mix_count,
        mixed_dir, workers=workers if workers is not None else cfg.workers,
    )

    report_path = stage_dir / "metrics_report.txt"
    _evaluate(cfg, manifest, model_dirs, unc_cfg, cur_cfg, report_path)

    stage_manifest = StageManifest(
        stage_index=stage_index,
        config_hash=config_hash(cfg),
        prediction_dirs=list(model_dirs),
        dataset_manifest=manifest_path,
        instance_db=instance_dir,
        background_db=background_dir,
        mixed_dir=mixed_dir,
        metrics_report=report_path,
        path=stage_dir / "stage_manifest.txt",
    )
    save_stage_manifest(stage_manifest, stage_manifest.path)
    return stage_manifest


def save_stage_manifest(manifest: StageManifest, path) -> None:
    lines = [STAGE_MANIFEST_HEADER + "\n"]
    lines.append(f"stage_index\t{manifest.stage_index}\n")
    lines.append(f"config_hash\t{manifest.config_hash}\n")
    for i, directory in enumerate(manifest.prediction_dirs):
        lines.append(f"prediction_dir\t{i}\t{directory}\n")
    lines.append(f"dataset_manifest\t{manifest.dataset_manifest}\n")
    lines.append(f"instance_db\t{manifest.instance_db}\n")
    lines.append(f"background_db\t{manifest.background_db}\n")
    lines.append(f"mixed_dir\t{manifest.mixed_dir}\n")
    lines.append(f"metrics_report\t{manifest.metrics_report}\n")
    with open(path, "w") as handle:
        handle.writelines(lines)


def load_stage_manifest(path) -> StageManifest:
    path = Path(path)
    fields = {}
    prediction_dirs = []
    with open(path, "r") as handle:
        header = handle.readline().rstrip("\n")
        if header != STAGE_MANIFEST_HEADER:
            raise KittimixError(f"{path}: unrecognized stage manifest header {header!r}")
        for line in handle:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "prediction_dir":
                prediction_dirs.append((int(parts[1]), Path(parts[2])))
            else:
                fields[parts[0]] = parts[1]
    prediction_dirs.sort()
    return StageManifest(
        stage_index=int(fields["stage_index"]),
        config_hash=fields["config_hash"],
        prediction_dirs=[d for _, d in prediction_dirs],
        dataset_manifest=Path(fields["dataset_manifest"]),
        instance_db=Path(fields["instance_db"]),
        background_db=Path(fields["background_db"]),
        mixed_dir=Path(fields["mixed_dir"]),
        metrics_report=Path(fields["metrics_report"]),
        path=path,
    )


def verify_stage_manifest(path) -> bool:
    """Recompute the snapshot hash and compare; False means tampering."""
    manifest = load_stage_manifest(path)
    snapshot = Path(path).parent / "config.snapshot"
    if not snapshot.is_file():
        return False
    digest = hashlib.sha256(snapshot.read_bytes()).hexdigest()
    return digest == manifest.config_hash
