"""Command-line interface.

Every subcommand takes --config. Exit codes: 0 success, 2 configuration or
usage problem, 3 missing input, 4 internal failure. On failure a single
machine-readable line goes to stderr:

    error\tkind=<ExceptionName>\tdetail=<message>
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .config import canonical_text, validate_config
from .curation import (
    BackgroundDatabase, InstanceDatabase, apply_filters,
    build_background_database, build_instance_database,
)
from .errors import (
    ConfigParseError, ConfigValidationError, EmptyInstanceDatabase, EmptyPools,
    KittimixError, MissingP2, MissingPredictions,
)
from .evaluation import EvalConfig, ap40, pseudo_label_pr, write_eval_report
from .kitti_io import format_label_line, parse_label_file, write_label_file
from .pipeline import (
    check_predictions, run_stage, scan_from_config, stage_dir_for,
)
from .synthesis import generate_epoch
from .uncertainty import (
    export_calibration_stats, load_ensemble_predictions, score_frame,
    write_calibration_stats,
)

logger = logging.getLogger(__name__)

_MISSING_INPUT = (
    FileNotFoundError, MissingPredictions, MissingP2, EmptyPools,
    EmptyInstanceDatabase,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kittimix",
        description="Ensemble pseudo-label curation and mixed-image synthesis "
                    "for KITTI-format 3D detection data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, stage=True, out=False, workers=False, seed=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config file")
        if stage:
            p.add_argument("--stage", type=int, default=1,
                           help="stage index selecting prediction directories")
        if out:
            p.add_argument("--out", default=None, help="output location override")
        if workers:
            p.add_argument("--workers", type=int, default=None, help="parallel workers")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="master seed override")
        return p

    add("validate", "parse and validate the config, echo effective values", stage=False)
    p = add("score", "print (box, uncertainty) rows for scored frames")
    p.add_argument("--frame", default=None, help="restrict to one frame id")
    add("curate", "write filtered pseudo-label files", out=True)
    add("db-build", "build the instance and background databases", out=True)
    p = add("mix", "synthesize a mixed epoch from built databases",
            out=True, workers=True, seed=True)
    p.add_argument("--count", type=int, default=None, help="samples to generate")
    p = add("eval", "evaluate prediction files against ground truth", stage=False, out=True)
    p.add_argument("--pred", required=True, help="directory of prediction files")
    p.add_argument("--gt", required=True, help="directory of ground-truth files")
    p.add_argument("--iou", type=float, default=None, help="IoU threshold override")
    p = add("stage", "run one full pipeline stage", workers=True)
    p = add("stats", "export (score, uncertainty, gt IoU) calibration rows", out=True)
    p.add_argument("--frame", default=None, help="restrict to one frame id")
    return parser


def _scored_unlabeled(cfg, stage_index, frame_filter=None):
    manifest = scan_from_config(cfg)
    model_dirs = cfg.model_dirs_for_stage(stage_index)
    frames = manifest.unlabeled
    if frame_filter is not None:
        frames = [f for f in frames if f.frame_id == frame_filter]
        if not frames:
            raise FileNotFoundError(f"unlabeled frame {frame_filter!r} not in dataset")
    check_predictions(frames, model_dirs)
    unc_cfg = cfg.uncertainty_for_stage(stage_index)
    out = []
    for frame in frames:
        preds = load_ensemble_predictions(frame.frame_id, model_dirs)
        out.append((frame, preds, score_frame(preds, unc_cfg)))
    return manifest, out


def cmd_validate(args) -> int:
    cfg = validate_config(args.config)
    sys.stdout.write(f"config ok: {args.config}\n")
    sys.stdout.write(canonical_text(cfg))
    return 0


def cmd_score(args) -> int:
    cfg = validate_config(args.config)
    _, scored = _scored_unlabeled(cfg, args.stage, args.frame)
    for frame, _, pairs in scored:
        for box, u in pairs:
            line = format_label_line(box, canonical=True)
            sys.stdout.write(f"{frame.frame_id}\t{line}\t{u!r}\n")
    return 0


def cmd_curate(args) -> int:
    cfg = validate_config(args.config)
    cur_cfg = cfg.curation_for_stage(args.stage)
    _, scored = _scored_unlabeled(cfg, args.stage)
    out_dir = Path(args.out) if args.out else stage_dir_for(cfg, args.stage) / "curated"
    out_dir.mkdir(parents=True, exist_ok=True)
    kept = total = 0
    for frame, _, pairs in scored:
        survivors = [b for b, _ in apply_filters(pairs, cur_cfg)]
        total += len(pairs)
        kept += len(survivors)
        write_label_file(survivors, out_dir / f"{frame.frame_id}.txt")
    sys.stdout.write(f"kept {kept} of {total} pseudo labels -> {out_dir}\n")
    return 0


def _db_dirs(cfg, stage_index, out_override=None):
    root = Path(out_override) if out_override else stage_dir_for(cfg, stage_index) / "databases"
    return root / "instances", root / "backgrounds"


def cmd_db_build(args) -> int:
    cfg = validate_config(args.config)
    cur_cfg = cfg.curation_for_stage(args.stage)
    manifest, scored = _scored_unlabeled(cfg, args.stage)
    scored_map = {frame.frame_id: pairs for frame, _, pairs in scored}
    predictions = {frame.frame_id: preds for frame, preds, _ in scored}
    filtered = {fid: apply_filters(pairs, cur_cfg) for fid, pairs in scored_map.items()}
    instance_dir, background_dir = _db_dirs(cfg, args.stage, args.out)
    instance_db = build_instance_database(manifest, scored_map, cur_cfg, instance_dir)
    background_db = build_background_database(
        manifest, predictions, background_dir, cfg=cur_cfg, filtered_by_frame=filtered)
    sys.stdout.write(
        f"instances {len(instance_db.records)} -> {instance_dir}\n"
        f"backgrounds {len(background_db.records)} -> {background_dir}\n"
    )
    return 0


def cmd_mix(args) -> int:
    cfg = validate_config(args.config)
    manifest = scan_from_config(cfg)
    instance_dir, background_dir = _db_dirs(cfg, args.stage)
    instances = InstanceDatabase.load(instance_dir)
    backgrounds = BackgroundDatabase.load(background_dir)
    mix_cfg = cfg.mix
    if args.seed is not None:
        mix_cfg = dataclasses.replace(mix_cfg, master_seed=args.seed)
    count = args.count if args.count is not None else cfg.mix_count
    out_dir = Path(args.out) if args.out else stage_dir_for(cfg, args.stage) / "mixed"
    workers = args.workers if args.workers is not None else cfg.workers
    entries = generate_epoch(manifest, instances, backgrounds, mix_cfg, count,
                             out_dir, workers=workers)
    pasted = sum(len(e.pasted_record_ids) for e in entries)
    sys.stdout.write(f"wrote {len(entries)} samples ({pasted} pastes) -> {out_dir}\n")
    return 0


def cmd_eval(args) -> int:
    cfg = validate_config(args.config)
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory {pred_dir} does not exist")
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"ground-truth directory {gt_dir} does not exist")
    iou_thr = args.iou if args.iou is not None else cfg.eval_iou_thr
    frames = []
    for gt_path in sorted(gt_dir.glob("*.txt")):
        pred_path = pred_dir / gt_path.name
        preds = parse_label_file(pred_path) if pred_path.is_file() else []
        frames.append((preds, parse_label_file(gt_path)))
    lines = [f"frames_evaluated {len(frames)}"]
    for category in cfg.eval_categories:
        eval_cfg = EvalConfig(iou_thr=iou_thr, category=category, bev=cfg.eval_bev)
        lines.append(f"ap40 category={category} iou_thr={iou_thr!r} value={ap40(frames, eval_cfg)!r}")
    pr = pseudo_label_pr(frames, iou_thr, bev=cfg.eval_bev)
    lines.append(
        f"pseudo_pr precision={pr.precision!r} recall={pr.recall!r} "
        f"tp={pr.true_positives} n_pseudo={pr.n_predicted} n_gt={pr.n_ground_truth}"
    )
    write_eval_report(lines, args.out if args.out else sys.stdout)
    return 0


def cmd_stage(args) -> int:
    cfg = validate_config(args.config)
    manifest = run_stage(cfg, args.stage, workers=args.workers)
    sys.stdout.write(f"stage {args.stage} complete -> {manifest.path}\n")
    return 0


def cmd_stats(args) -> int:
    cfg = validate_config(args.config)
    manifest = scan_from_config(cfg)
    model_dirs = cfg.model_dirs_for_stage(args.stage)
    unc_cfg = cfg.uncertainty_for_stage(args.stage)
    rows = []
    for frame in manifest.labeled:
        if args.frame is not None and frame.frame_id != args.frame:
            continue
        if not all((Path(d) / f"{frame.frame_id}.txt").is_file() for d in model_dirs):
            continue
        preds = load_ensemble_predictions(frame.frame_id, model_dirs)
        scored = score_frame(preds, unc_cfg)
        rows.extend(export_calibration_stats(scored, frame.labels))
    if args.out:
        write_calibration_stats(rows, args.out)
    else:
        sys.stdout.write("score,uncertainty,iou3d_gt\n")
        for score, u, iou in rows:
            sys.stdout.write(f"{score!r},{u!r},{iou!r}\n")
    return 0


_COMMANDS = {
    "validate": cmd_validate,
    "score": cmd_score,
    "curate": cmd_curate,
    "db-build": cmd_db_build,
    "mix": cmd_mix,
    "eval": cmd_eval,
    "stage": cmd_stage,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(message)s", level=logging.INFO)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigParseError, ConfigValidationError) as exc:
        _report(exc)
        return 2
    except _MISSING_INPUT as exc:
        _report(exc)
        return 3
    except KittimixError as exc:
        _report(exc)
        return 4
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _report(exc)
        return 4


def _report(exc: BaseException) -> None:
    detail = str(exc).replace("\t", " ").replace("\n", " ")
    sys.stderr.write(f"error\tkind={type(exc).__name__}\tdetail={detail}\n")


def entrypoint() -> None:
    sys.exit(main())
