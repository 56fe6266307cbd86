"""KITTI-format label, prediction, and calibration I/O plus dataset scanning.

Label files carry one object per line:

    type truncated occluded alpha left top right bottom h w l x y z ry [score]

15 fields for ground truth, 16 for detections. Lines are preserved verbatim
through parse/write (DontCare rows included); curation policy lives
downstream. Canonical formatting writes geometry with 2 decimals and scores
with 4, rounding halves away from zero, so write(parse(f)) == f holds
byte-for-byte on canonical files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path

from .errors import KittimixError, MalformedCalib, MalformedLine, MissingP2
from .geometry import Box3D, CameraProjection

logger = logging.getLogger(__name__)

LABELED = "labeled"
UNLABELED = "unlabeled"

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

MANIFEST_HEADER = "kittimix-dataset-manifest v1"


def format_real(value: float, places: int) -> str:
    """Fixed-point decimal string with halves rounded away from zero.

    repr() recovers the shortest decimal naming the float, so -1.585 rounds
    to "-1.59"; printf-style %.2f would apply binary round-half-even here.
    """
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def parse_label_line(line: str, path="<string>", line_no: int = 0) -> Box3D:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise MalformedLine(path, line_no, line)
    try:
        truncated = float(fields[1])
        occluded = int(float(fields[2]))
        alpha = float(fields[3])
        bbox = tuple(float(v) for v in fields[4:8])
        h, w, length = (float(v) for v in fields[8:11])
        x, y, z = (float(v) for v in fields[11:14])
        rotation_y = float(fields[14])
        score = float(fields[15]) if len(fields) == 16 else None
    except ValueError:
        raise MalformedLine(path, line_no, line) from None
    return Box3D(
        category=fields[0],
        location=(x, y, z),
        dimensions=(h, w, length),
        rotation_y=rotation_y,
        bbox2d=bbox,
        score=score,
        truncated=truncated,
        occluded=occluded,
        alpha=alpha,
    )


def parse_label_file(path) -> list[Box3D]:
    path = Path(path)
    boxes = []
    with open(path, "r") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            boxes.append(parse_label_line(line, path, line_no))
    return boxes


def format_label_line(box: Box3D, canonical: bool = True) -> str:
    if box.bbox2d is not None:
        bbox = box.bbox2d
    else:
        bbox = (-1.0, -1.0, -1.0, -1.0)
    reals = [box.truncated, box.alpha, *bbox, *box.dimensions, *box.location, box.rotation_y]
    if canonical:
        parts = [box.category, format_real(box.truncated, 2), str(box.occluded)]
        parts += [format_real(v, 2) for v in reals[1:]]
        if box.score is not None:
            parts.append(format_real(box.score, 4))
    else:
        parts = [box.category, repr(float(box.truncated)), str(box.occluded)]
        parts += [repr(float(v)) for v in reals[1:]]
        if box.score is not None:
            parts.append(repr(float(box.score)))
    return " ".join(parts)


def write_label_file(boxes, path, canonical: bool = True) -> None:
    path = Path(path)
    lines = [format_label_line(b, canonical=canonical) + "\n" for b in boxes]
    with open(path, "w") as handle:
        handle.writelines(lines)


def parse_calib(path) -> CameraProjection:
    path = Path(path)
    with open(path, "r") as handle:
        for line in handle:
            if not line.startswith("P2:"):
                continue
            payload = line.split(":", 1)[1].split()
            if len(payload) != 12:
                raise MalformedCalib(f"{path}: P2 carries {len(payload)} values, expected 12")
            try:
                entries = tuple(float(v) for v in payload)
            except ValueError:
                raise MalformedCalib(f"{path}: non-numeric P2 entry") from None
            return CameraProjection(entries)
    raise MissingP2(f"{path}: no P2 line")


def write_calib(cam: CameraProjection, path) -> None:
    """Write a minimal calibration file holding only the P2 row."""
    with open(path, "w") as handle:
        handle.write("P2: " + " ".join(repr(v) for v in cam.entries) + "\n")


@dataclass
class Frame:
    """One dataset frame; labels is None exactly for unlabeled frames."""

    frame_id: str
    split: str
    image_path: Path
    calib_path: Path
    calib: CameraProjection
    label_path: Path | None = None
    labels: list[Box3D] | None = None


@dataclass
class DatasetManifest:
    labeled: list[Frame] = field(default_factory=list)
    unlabeled: list[Frame] = field(default_factory=list)
    orphans: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled)


def _find_image(directory: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        candidate = directory / (stem + ext)
        if candidate.is_file():
            return candidate
    return None


def load_exclusion_file(path) -> frozenset[str]:
    stems = set()
    with open(path, "r") as handle:
        for line in handle:
            line = line.split("#", 1)[0].strip()
            if line:
                stems.add(line)
    return frozenset(stems)


def scan_dataset(label_dir, unlabeled_image_dir, labeled_image_dir, calib_dir,
                 exclude=frozenset()) -> DatasetManifest:
    """Match frames by filename stem across the four directories.

    Labeled frames are the stems of label files; unlabeled frames are the
    image stems under unlabeled_image_dir. Both splits read calibration from
    calib_dir. Frames missing a component become orphans (warned, skipped);
    stems listed in `exclude` are dropped silently; ordering is lexicographic
    by frame id regardless of filesystem order.
    """
    label_dir = Path(label_dir)
    unlabeled_image_dir = Path(unlabeled_image_dir)
    labeled_image_dir = Path(labeled_image_dir)
    calib_dir = Path(calib_dir)
    manifest = DatasetManifest()

    for label_path in sorted(label_dir.glob("*.txt")):
        stem = label_path.stem
        if stem in exclude:
            continue
        image_path = _find_image(labeled_image_dir, stem)
        calib_path = calib_dir / (stem + ".txt")
        missing = "image" if image_path is None else ("calib" if not calib_path.is_file() else None)
        if missing:
            logger.warning("orphan frame %s: missing %s", stem, missing)
            manifest.orphans.append((stem, missing))
            continue
        manifest.labeled.append(Frame(
            frame_id=stem,
            split=LABELED,
            image_path=image_path,
            calib_path=calib_path,
            calib=parse_calib(calib_path),
            label_path=label_path,
            labels=parse_label_file(label_path),
        ))

    labeled_ids = {f.frame_id for f in manifest.labeled}
    seen = set()
    for image_path in sorted(unlabeled_image_dir.iterdir()):
        if image_path.suffix.lower() not in IMAGE_EXTENSIONS or image_path.stem in seen:
            continue
        stem = image_path.stem
        seen.add(stem)
        if stem in exclude:
            continue
        if stem in labeled_ids:
            logger.warning("orphan frame %s: stem already labeled", stem)
            manifest.orphans.append((stem, "duplicate"))
            continue
        calib_path = calib_dir / (stem + ".txt")
        if not calib_path.is_file():
            logger.warning("orphan frame %s: missing calib", stem)
            manifest.orphans.append((stem, "calib"))
            continue
        manifest.unlabeled.append(Frame(
            frame_id=stem,
            split=UNLABELED,
            image_path=image_path,
            calib_path=calib_path,
            calib=parse_calib(calib_path),
        ))
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [MANIFEST_HEADER + "\n"]
    for frame in manifest.labeled:
        lines.append("\t".join([
            LABELED, frame.frame_id, str(frame.image_path),
            str(frame.calib_path), str(frame.label_path),
        ]) + "\n")
    for frame in manifest.unlabeled:
        lines.append("\t".join([
            UNLABELED, frame.frame_id, str(frame.image_path), str(frame.calib_path),
        ]) + "\n")
    with open(path, "w") as handle:
        handle.writelines(lines)


def load_manifest(path) -> DatasetManifest:
    manifest = DatasetManifest()
    with open(path, "r") as handle:
        header = handle.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise KittimixError(f"{path}: unrecognized manifest header {header!r}")
        for line in handle:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if parts[0] == LABELED:
                _, frame_id, image_path, calib_path, label_path = parts
                manifest.labeled.append(Frame(
                    frame_id=frame_id,
                    split=LABELED,
                    image_path=Path(image_path),
                    calib_path=Path(calib_path),
                    calib=parse_calib(calib_path),
                    label_path=Path(label_path),
                    labels=parse_label_file(label_path),
                ))
            else:
                _, frame_id, image_path, calib_path = parts
                manifest.unlabeled.append(Frame(
                    frame_id=frame_id,
                    split=UNLABELED,
                    image_path=Path(image_path),
                    calib_path=Path(calib_path),
                    calib=parse_calib(calib_path),
                ))
    return manifest
