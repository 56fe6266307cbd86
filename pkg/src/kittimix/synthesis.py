"""Mixed-image synthesis: paste curated instance patches onto target frames.

Each output sample picks a target (background frame with probability
p_background, else a labeled frame), then repeatedly draws instance patches
and pastes them at their original image coordinates when they pass a 2D
collision test against everything already on the target. Accepted patches
run through border_cut -> color_pad -> mixup, in that order; the first two
fire with their configured probabilities, mixup always. 3D label geometry is
copied verbatim; only pixels are augmented.

Sample i of an epoch derives its seed from (master_seed, i) alone, so output
bytes are identical across reruns and worker counts.

Per-sample RNG draw order (one numpy Generator each for target choice and
composition): target kind uniform, target index, k_paste; then per paste
attempt the candidate index, and on acceptance the border-cut gate
(side, ratio when it fires), the color-pad gate (side, ratio, color when it
fires), and the mixup weight.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curation import (
    BackgroundDatabase, InstanceDatabase, clamp_rect, load_image, save_png,
)
from .errors import (
    CalibrationMismatch, EmptyInstanceDatabase, EmptyPools, PatchTooSmall,
    ShapeMismatch,
)
from .geometry import Box3D, CameraProjection, iou2d
from .kitti_io import Frame, format_label_line

logger = logging.getLogger(__name__)

ORIGIN_HUMAN = "Human"
ORIGIN_PSEUDO = "Pseudo"

SIDES = ("left", "top", "right", "bottom")

LABELED_TARGET = "labeled"
BACKGROUND_TARGET = "background"

EPOCH_MANIFEST_HEADER = "kittimix-epoch-manifest v1"

# Pasting across differing cameras would invalidate the copied 3D geometry.
CALIB_TOLERANCE = 1e-6


@dataclass(frozen=True)
class MixConfig:
    p_background: float = 0.42
    p_border_cut: float = 0.5
    p_color_pad: float = 0.5
    border_cut_ratio_range: tuple[float, float] = (0.0, 0.3)
    mixup_weight_range: tuple[float, float] = (0.6, 1.0)
    collision_iou_thr: float = 0.1
    max_paste_attempts: int = 8
    k_paste_range: tuple[int, int] = (2, 6)
    master_seed: int = 0


@dataclass(frozen=True)
class Target:
    kind: str
    frame_id: str
    image_path: Path
    calib: CameraProjection
    labels: tuple[Box3D, ...] = ()


@dataclass
class MixedSample:
    image: np.ndarray
    labels: list[tuple[Box3D, str]]
    target_frame_id: str
    target_kind: str
    pasted_record_ids: list[str]
    calib: CameraProjection
    sample_seed: int


@dataclass(frozen=True)
class EpochEntry:
    sample_id: str
    sample_seed: int
    target_kind: str
    target_frame_id: str
    k_paste: int
    pasted_record_ids: tuple[str, ...]


def derive_sample_seed(master_seed: int, index: int) -> int:
    """Stable 64-bit per-sample seed; independent of platform and scheduling."""
    digest = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _target_rng(sample_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([sample_seed, 0]))


def _compose_rng(sample_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([sample_seed, 1]))


def sample_target(rng: np.random.Generator, labeled, backgrounds, cfg: MixConfig) -> Target:
    """Bernoulli(p_background) pool choice, then a uniform index.

    An empty pool forfeits its probability mass to the other; both empty is
    an error.
    """
    if not labeled and not backgrounds:
        raise EmptyPools("no labeled frames and no background frames")
    p = cfg.p_background
    if not backgrounds:
        p = 0.0
    elif not labeled:
        p = 1.0
    use_background = rng.random() < p
    pool = backgrounds if use_background else labeled
    pick = pool[int(rng.integers(len(pool)))]
    if use_background:
        return Target(
            kind=BACKGROUND_TARGET,
            frame_id=pick.frame_id,
            image_path=Path(pick.image_path),
            calib=pick.calib,
        )
    return Target(
        kind=LABELED_TARGET,
        frame_id=pick.frame_id,
        image_path=Path(pick.image_path),
        calib=pick.calib,
        labels=tuple(pick.labels or ()),
    )


def collision_test(candidate, existing, cfg: MixConfig) -> bool:
    """Accept iff the candidate's worst 2D IoU stays at or below the threshold."""
    return all(iou2d(candidate, rect) <= cfg.collision_iou_thr for rect in existing)


def _strip(extent: int, ratio: float) -> int:
    return int(np.floor(ratio * extent))


def border_cut(patch: np.ndarray, ratio: float, side: str) -> np.ndarray:
    """Drop floor(ratio * side_length) pixels from one border."""
    if not 0.0 <= ratio <= 0.3:
        raise ValueError(f"border cut ratio {ratio} outside [0, 0.3]")
    h, w = patch.shape[:2]
    if side in ("left", "right"):
        cut = _strip(w, ratio)
        if cut >= w:
            raise PatchTooSmall(f"cut {cut} >= width {w}")
        return patch[:, cut:] if side == "left" else patch[:, : w - cut]
    cut = _strip(h, ratio)
    if cut >= h:
        raise PatchTooSmall(f"cut {cut} >= height {h}")
    return patch[cut:] if side == "top" else patch[: h - cut]


def color_pad(patch: np.ndarray, ratio: float, side: str, color) -> np.ndarray:
    """Overwrite one border strip with a solid color; size is unchanged."""
    out = patch.copy()
    h, w = patch.shape[:2]
    color = np.asarray(color, dtype=patch.dtype)
    if side == "left":
        out[:, : _strip(w, ratio)] = color
    elif side == "right":
        out[:, w - _strip(w, ratio):] = color
    elif side == "top":
        out[: _strip(h, ratio)] = color
    else:
        out[h - _strip(h, ratio):] = color
    return out


def mixup_blend(fg: np.ndarray, bg: np.ndarray, weight: float) -> np.ndarray:
    """Per-pixel w*fg + (1-w)*bg, rounded to the nearest integer value."""
    if fg.shape != bg.shape:
        raise ShapeMismatch(f"fg {fg.shape} vs bg {bg.shape}")
    blended = weight * fg.astype(np.float64) + (1.0 - weight) * bg.astype(np.float64)
    return np.rint(blended).astype(fg.dtype)


def compose_mixed_image(target: Target, instances: InstanceDatabase, k_paste: int,
                        cfg: MixConfig, sample_seed: int) -> MixedSample:
    """Paste up to k_paste instance patches onto one target frame.

    Candidates are drawn uniformly from the database and land at their
    original crop coordinates, clamped to the target. A candidate failing
    the collision test, or losing more than half its area to clamping,
    counts as one failed attempt; composition stops at k_paste successes or
    max_paste_attempts consecutive failures. Identical (target, database,
    cfg, sample_seed) inputs reproduce the sample bit for bit.
    """
    if not instances.records:
        raise EmptyInstanceDatabase(str(instances.root))
    rng = _compose_rng(sample_seed)
    image = load_image(target.image_path).copy()
    height, width = image.shape[:2]

    labels: list[tuple[Box3D, str]] = [(b, ORIGIN_HUMAN) for b in target.labels]
    occupied = [b.bbox2d for b in target.labels if b.bbox2d is not None]
    pasted_ids: list[str] = []

    successes = 0
    consecutive_failures = 0
    while successes < k_paste and consecutive_failures < cfg.max_paste_attempts:
        record = instances.records[int(rng.integers(len(instances.records)))]
        if not record.source_calib.approx_equal(target.calib, CALIB_TOLERANCE):
            raise CalibrationMismatch(
                f"record {record.record_id} calibrated differently from "
                f"target {target.frame_id}"
            )
        x0, y0, x1, y1 = record.crop_rect
        visible = clamp_rect((x0, y0, x1, y1), width, height)
        if visible is None or 2 * _area(visible) < _area(record.crop_rect):
            consecutive_failures += 1
            continue
        vis_f = tuple(float(v) for v in visible)
        if not collision_test(vis_f, occupied, cfg):
            consecutive_failures += 1
            continue

        patch = instances.load_patch(record)
        vx0, vy0, vx1, vy1 = visible
        patch = patch[vy0 - y0: vy1 - y0, vx0 - x0: vx1 - x0]
        px0, py0, px1, py1 = visible

        if rng.random() < cfg.p_border_cut:
            side = SIDES[int(rng.integers(len(SIDES)))]
            ratio = float(rng.uniform(*cfg.border_cut_ratio_range))
            before = patch.shape
            patch = border_cut(patch, ratio, side)
            if side == "left":
                px0 += before[1] - patch.shape[1]
            elif side == "right":
                px1 -= before[1] - patch.shape[1]
            elif side == "top":
                py0 += before[0] - patch.shape[0]
            else:
                py1 -= before[0] - patch.shape[0]
        if rng.random() < cfg.p_color_pad:
            side = SIDES[int(rng.integers(len(SIDES)))]
            ratio = float(rng.uniform(*cfg.border_cut_ratio_range))
            color = rng.integers(0, 256, size=3)
            patch = color_pad(patch, ratio, side, color)
        weight = float(rng.uniform(*cfg.mixup_weight_range))
        image[py0:py1, px0:px1] = mixup_blend(patch, image[py0:py1, px0:px1], weight)

        labels.append((record.pseudo_label, ORIGIN_PSEUDO))
        occupied.append(vis_f)
        pasted_ids.append(record.record_id)
        successes += 1
        consecutive_failures = 0

    return MixedSample(
        image=image,
        labels=labels,
        target_frame_id=target.frame_id,
        target_kind=target.kind,
        pasted_record_ids=pasted_ids,
        calib=target.calib,
        sample_seed=sample_seed,
    )


def _area(rect) -> int:
    return (rect[2] - rect[0]) * (rect[3] - rect[1])


def _labeled_pool(manifest) -> list[Frame]:
    return list(manifest.labeled)


def write_sample(sample: MixedSample, sample_id: str, out_dir: Path) -> None:
    save_png(sample.image, out_dir / "images" / f"{sample_id}.png")
    label_lines = []
    origin_lines = []
    for box, origin in sample.labels:
        label_lines.append(format_label_line(box, canonical=True) + "\n")
        origin_lines.append(origin + "\n")
    (out_dir / "labels" / f"{sample_id}.txt").write_text("".join(label_lines))
    (out_dir / "origins" / f"{sample_id}.txt").write_text("".join(origin_lines))


def generate_epoch(manifest, instances: InstanceDatabase, backgrounds: BackgroundDatabase,
                   cfg: MixConfig, count: int, out_dir, workers: int = 1) -> list[EpochEntry]:
    """Write `count` mixed samples plus an epoch manifest under out_dir.

    Workers only parallelize independent samples; outputs are byte-identical
    for any worker count.
    """
    out_dir = Path(out_dir)
    for sub in ("images", "labels", "origins"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    labeled = _labeled_pool(manifest)
    bg_records = list(backgrounds.records)
    k_lo, k_hi = cfg.k_paste_range

    def build(index: int) -> EpochEntry:
        sample_seed = derive_sample_seed(cfg.master_seed, index)
        t_rng = _target_rng(sample_seed)
        target = sample_target(t_rng, labeled, bg_records, cfg)
        k_paste = int(t_rng.integers(k_lo, k_hi + 1))
        sample = compose_mixed_image(target, instances, k_paste, cfg, sample_seed)
        sample_id = f"{index:06d}"
        write_sample(sample, sample_id, out_dir)
        return EpochEntry(
            sample_id=sample_id,
            sample_seed=sample_seed,
            target_kind=target.kind,
            target_frame_id=target.frame_id,
            k_paste=k_paste,
            pasted_record_ids=tuple(sample.pasted_record_ids),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build, range(count)))
    else:
        entries = [build(i) for i in range(count)]

    with open(out_dir / "epoch_manifest.txt", "w") as handle:
        handle.write(EPOCH_MANIFEST_HEADER + "\n")
        handle.write(f"master_seed\t{cfg.master_seed}\n")
        handle.write(f"count\t{count}\n")
        for entry in entries:
            pasted = ",".join(entry.pasted_record_ids) if entry.pasted_record_ids else "-"
            handle.write("\t".join([
                entry.sample_id, str(entry.sample_seed), entry.target_kind,
                entry.target_frame_id, str(entry.k_paste), pasted,
            ]) + "\n")
    return entries
