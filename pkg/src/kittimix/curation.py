"""Pseudo-label filtering and instance / background database construction.

Filters are strict-threshold set selections over scored boxes; survivors are
cropped out of their source images into a patch database that mixing draws
from later. Frames where the raw ensemble found nothing at all become the
background pool. Database layout:

    <db>/VERSION              schema tag
    <db>/index.txt            one record per line, tab-separated
    <db>/patches/<id>.png     lossless crops (instance database only)

Floats in index files are serialized with repr() so a rebuild over identical
inputs is byte-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BehindCamera
from .geometry import Box3D, CameraProjection, project_to_image
from .kitti_io import DatasetManifest
from .uncertainty import EnsemblePredictions

logger = logging.getLogger(__name__)

INSTANCE_DB_VERSION = "kittimix-instance-db v1"
BACKGROUND_DB_VERSION = "kittimix-background-db v1"


@dataclass(frozen=True)
class CurationConfig:
    conf_thr: float = 0.7
    unc_thr: float = 0.25
    categories: frozenset[str] = frozenset({"Car", "Pedestrian", "Cyclist"})
    # Background test source: raw ensemble output (default) or the
    # post-filter survivor set.
    existence_from_raw: bool = True


def confidence_filter(scored, cfg: CurationConfig):
    """Keep boxes with score strictly above conf_thr."""
    return [(b, u) for b, u in scored if b.score is not None and b.score > cfg.conf_thr]


def uncertainty_filter(scored, cfg: CurationConfig):
    """Keep boxes with uncertainty strictly below unc_thr."""
    return [(b, u) for b, u in scored if u < cfg.unc_thr]


def apply_filters(scored, cfg: CurationConfig):
    """Composed curation filter: score > conf_thr and u < unc_thr."""
    return uncertainty_filter(confidence_filter(scored, cfg), cfg)


def object_existence_filter(preds: EnsemblePredictions) -> bool:
    """True when the raw ensemble produced no boxes for this frame."""
    return len(preds.boxes) == 0


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_png(array: np.ndarray, path) -> None:
    Image.fromarray(array, mode="RGB").save(path, format="PNG")


def clamp_rect(rect, width: int, height: int) -> tuple[int, int, int, int] | None:
    """Integer pixel rect covering `rect`, clamped into the image; None if empty."""
    x0 = max(0, int(np.floor(rect[0])))
    y0 = max(0, int(np.floor(rect[1])))
    x1 = min(width, int(np.ceil(rect[2])))
    y1 = min(height, int(np.ceil(rect[3])))
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1, y1)


@dataclass(frozen=True)
class InstanceRecord:
    record_id: str
    source_frame_id: str
    crop_rect: tuple[int, int, int, int]
    uncertainty: float
    pseudo_label: Box3D
    source_calib: CameraProjection
    patch_relpath: str


@dataclass
class InstanceDatabase:
    root: Path
    records: list[InstanceRecord] = field(default_factory=list)

    def load_patch(self, record: InstanceRecord) -> np.ndarray:
        return load_image(self.root / record.patch_relpath)

    @classmethod
    def load(cls, root) -> "InstanceDatabase":
        root = Path(root)
        version = (root / "VERSION").read_text().strip()
        if version != INSTANCE_DB_VERSION:
            raise ValueError(f"{root}: unsupported database version {version!r}")
        db = cls(root=root)
        with open(root / "index.txt", "r") as handle:
            for line in handle:
                if line.strip():
                    db.records.append(_parse_instance_line(line.rstrip("\n")))
        return db


@dataclass(frozen=True)
class BackgroundRecord:
    frame_id: str
    image_path: Path
    calib: CameraProjection


@dataclass
class BackgroundDatabase:
    root: Path
    records: list[BackgroundRecord] = field(default_factory=list)

    @classmethod
    def load(cls, root) -> "BackgroundDatabase":
        root = Path(root)
        version = (root / "VERSION").read_text().strip()
        if version != BACKGROUND_DB_VERSION:
            raise ValueError(f"{root}: unsupported database version {version!r}")
        db = cls(root=root)
        with open(root / "index.txt", "r") as handle:
            for line in handle:
                if not line.strip():
                    continue
                fields = line.rstrip("\n").split("\t")
                frame_id, image_path = fields[0], fields[1]
                calib = CameraProjection(tuple(float(v) for v in fields[2:14]))
                db.records.append(BackgroundRecord(frame_id, Path(image_path), calib))
        return db


def _format_instance_line(rec: InstanceRecord) -> str:
    box = rec.pseudo_label
    fields = [
        rec.record_id,
        rec.source_frame_id,
        *[str(v) for v in rec.crop_rect],
        repr(rec.uncertainty),
        box.category,
        repr(float(box.score)),
        repr(float(box.truncated)),
        str(box.occluded),
        repr(float(box.alpha)),
        *[repr(float(v)) for v in (box.bbox2d if box.bbox2d is not None else (-1.0,) * 4)],
        *[repr(float(v)) for v in box.dimensions],
        *[repr(float(v)) for v in box.location],
        repr(float(box.rotation_y)),
        *[repr(float(v)) for v in rec.source_calib.entries],
        rec.patch_relpath,
    ]
    return "\t".join(fields)


def _parse_instance_line(line: str) -> InstanceRecord:
    f = line.split("\t")
    if len(f) != 36:
        raise ValueError(f"instance index line with {len(f)} fields, expected 36")
    box = Box3D(
        category=f[7],
        location=(float(f[19]), float(f[20]), float(f[21])),
        dimensions=(float(f[16]), float(f[17]), float(f[18])),
        rotation_y=float(f[22]),
        bbox2d=(float(f[12]), float(f[13]), float(f[14]), float(f[15])),
        score=float(f[8]),
        truncated=float(f[9]),
        occluded=int(f[10]),
        alpha=float(f[11]),
    )
    return InstanceRecord(
        record_id=f[0],
        source_frame_id=f[1],
        crop_rect=(int(f[2]), int(f[3]), int(f[4]), int(f[5])),
        uncertainty=float(f[6]),
        pseudo_label=box,
        source_calib=CameraProjection(tuple(float(v) for v in f[23:35])),
        patch_relpath=f[35],
    )


def build_instance_database(manifest: DatasetManifest, scored_by_frame, cfg: CurationConfig,
                            out_dir) -> InstanceDatabase:
    """Crop filter survivors into <out_dir> and persist the index.

    scored_by_frame maps frame_id -> list of (box, uncertainty) pairs from
    score_frame. Crops use the detector's 2D box when present, otherwise the
    projected 3D box; crops that miss the image entirely (or sit behind the
    camera) are skipped with a warning. Rebuilding over identical inputs is
    byte-identical.
    """
    out_dir = Path(out_dir)
    patches_dir = out_dir / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)

    db = InstanceDatabase(root=out_dir)
    for frame in manifest.unlabeled:
        scored = scored_by_frame.get(frame.frame_id)
        if not scored:
            continue
        survivors = [
            (b, u) for b, u in apply_filters(scored, cfg)
            if b.category in cfg.categories
        ]
        if not survivors:
            continue
        image = load_image(frame.image_path)
        height, width = image.shape[:2]
        for k, (box, u) in enumerate(survivors):
            rect2d = box.bbox2d
            if rect2d is None:
                try:
                    rect2d = project_to_image(box, frame.calib)
                except BehindCamera:
                    logger.warning("frame %s: box behind camera, skipped", frame.frame_id)
                    continue
            rect = clamp_rect(rect2d, width, height)
            if rect is None:
                logger.warning("frame %s: crop outside image, skipped", frame.frame_id)
                continue
            record_id = f"{frame.frame_id}_{k:03d}"
            relpath = f"patches/{record_id}.png"
            x0, y0, x1, y1 = rect
            save_png(image[y0:y1, x0:x1], out_dir / relpath)
            db.records.append(InstanceRecord(
                record_id=record_id,
                source_frame_id=frame.frame_id,
                crop_rect=rect,
                uncertainty=float(u),
                pseudo_label=box,
                source_calib=frame.calib,
                patch_relpath=relpath,
            ))

    with open(out_dir / "index.txt", "w") as handle:
        for rec in db.records:
            handle.write(_format_instance_line(rec) + "\n")
    (out_dir / "VERSION").write_text(INSTANCE_DB_VERSION + "\n")
    return db


def build_background_database(manifest: DatasetManifest, predictions_by_frame, out_dir,
                              cfg: CurationConfig | None = None,
                              filtered_by_frame=None) -> BackgroundDatabase:
    """Index unlabeled frames that the ensemble saw as object-free.

    The index references the original images; nothing is copied. With
    cfg.existence_from_raw unset, filtered_by_frame (frame_id -> surviving
    boxes) supplies the emptiness test instead of the raw output.
    """
    cfg = cfg or CurationConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    db = BackgroundDatabase(root=out_dir)
    for frame in manifest.unlabeled:
        if cfg.existence_from_raw:
            preds = predictions_by_frame.get(frame.frame_id)
            is_background = preds is None or object_existence_filter(preds)
        else:
            if filtered_by_frame is None:
                raise ValueError("existence_from_raw=False requires filtered_by_frame")
            is_background = not filtered_by_frame.get(frame.frame_id)
        if is_background:
            db.records.append(BackgroundRecord(
                frame_id=frame.frame_id,
                image_path=frame.image_path,
                calib=frame.calib,
            ))

    with open(out_dir / "index.txt", "w") as handle:
        for rec in db.records:
            fields = [rec.frame_id, str(rec.image_path)]
            fields += [repr(float(v)) for v in rec.calib.entries]
            handle.write("\t".join(fields) + "\n")
    (out_dir / "VERSION").write_text(BACKGROUND_DB_VERSION + "\n")
    return db
