"""Ensemble agreement scoring for pseudo labels.

Predictions from N detector snapshots are greedily clustered by 3D IoU
against a max-score seed, and each cluster receives an uncertainty in [0, 1]
derived from how much of the potential cross-model agreement it realizes:

    u = 1 - sum_{i,j in members} a_ij * iou3d(b_i, b_j)
          / sum_{i,j in slots}   a_ij,          a_ij = beta if i == j else 1

With beta = 1 and M identical member boxes out of N models this collapses to
u = 1 - M^2 / N^2: full agreement scores 0, a box nobody else reproduces
scores high, an object no model detects scores 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, box_corners, iou3d

logger = logging.getLogger(__name__)

CALIBRATION_CSV_HEADER = "score,uncertainty,iou3d_gt"


@dataclass(frozen=True)
class UncertaintyConfig:
    cluster_iou_thr: float = 0.5
    beta: float = 1.0
    # When set, only the best-scored box per model inside a cluster enters
    # the uncertainty computation; membership itself is unchanged.
    dedupe_same_model: bool = False


@dataclass
class EnsemblePredictions:
    """All boxes one ensemble produced for one frame.

    boxes holds (model_index, box) pairs in per-model file order; every box
    must carry a score.
    """

    frame_id: str
    n_models: int
    boxes: list[tuple[int, Box3D]] = field(default_factory=list)


@dataclass
class Cluster:
    """One mutually-consistent group of ensemble boxes.

    members are ordered by (score desc, model_index asc, input order); the
    seed that founded the cluster is members[0] and doubles as the
    representative, keeping its own score.
    """

    members: list[Box3D]
    member_models: list[int]
    representative: Box3D
    uncertainty: float | None = None


def load_ensemble_predictions(frame_id: str, model_dirs) -> EnsemblePredictions:
    """Read one frame's prediction file from each model directory."""
    from .kitti_io import parse_label_file

    preds = EnsemblePredictions(frame_id=frame_id, n_models=len(model_dirs))
    for model_index, directory in enumerate(model_dirs):
        path = Path(directory) / f"{frame_id}.txt"
        for box in parse_label_file(path):
            preds.boxes.append((model_index, box))
    return preds


def _footprint_bounds(box: Box3D):
    corners = box_corners(box)
    return (
        corners[:4, 0].min(), corners[:4, 0].max(),
        corners[:4, 2].min(), corners[:4, 2].max(),
    )


def cluster_predictions(preds: EnsemblePredictions, cfg: UncertaintyConfig) -> list[Cluster]:
    """Greedy seed-based clustering of one frame's ensemble output.

    Boxes are visited in (score desc, model index asc, input order)
    precedence. The highest-precedence unclustered box seeds a cluster and
    captures every unclustered box whose iou3d against the seed exceeds
    cluster_iou_thr; a box therefore lands in exactly one cluster. Clusters
    come out in descending seed score.
    """
    n = len(preds.boxes)
    if n == 0:
        return []
    for _, box in preds.boxes:
        if box.score is None:
            raise ValueError(f"frame {preds.frame_id}: prediction without score")

    order = sorted(
        range(n),
        key=lambda i: (-preds.boxes[i][1].score, preds.boxes[i][0], i),
    )
    boxes = [preds.boxes[i][1] for i in order]
    models = [preds.boxes[i][0] for i in order]

    bounds = np.array([_footprint_bounds(b) for b in boxes])
    y_top = np.array([b.location[1] - b.dimensions[0] for b in boxes])
    y_bottom = np.array([b.location[1] for b in boxes])

    unclustered = np.ones(n, dtype=bool)
    clusters: list[Cluster] = []
    for seed in range(n):
        if not unclustered[seed]:
            continue
        # Cheap separating-axis reject before exact IoU: disjoint footprint
        # AABBs or disjoint vertical spans cannot overlap.
        overlap = (
            unclustered
            & (bounds[:, 0] < bounds[seed, 1]) & (bounds[seed, 0] < bounds[:, 1])
            & (bounds[:, 2] < bounds[seed, 3]) & (bounds[seed, 2] < bounds[:, 3])
            & (y_top < y_bottom[seed]) & (y_top[seed] < y_bottom)
        )
        member_idx = [seed]
        for j in np.flatnonzero(overlap):
            if j != seed and iou3d(boxes[j], boxes[seed]) > cfg.cluster_iou_thr:
                member_idx.append(int(j))
        member_idx.sort()
        unclustered[member_idx] = False
        clusters.append(Cluster(
            members=[boxes[j] for j in member_idx],
            member_models=[models[j] for j in member_idx],
            representative=boxes[seed],
        ))
    return clusters


def pairwise_agreement(members, beta: float) -> float:
    """sum over ordered member pairs of a_ij * iou3d; self-pairs use iou 1."""
    total = beta * len(members)
    for i in range(len(members)):
        for j in range(i + 1, len(members)):
            total += 2.0 * iou3d(members[i], members[j])
    return total


def cluster_uncertainty(cluster: Cluster, n_models: int, cfg: UncertaintyConfig) -> float:
    """Uncertainty in [0, 1]; an empty member list scores exactly 1."""
    members = cluster.members
    if cfg.dedupe_same_model and members:
        best: dict[int, Box3D] = {}
        for model, box in zip(cluster.member_models, members):
            kept = best.get(model)
            if kept is None or box.score > kept.score:
                best[model] = box
        members = list(best.values())
    if not members:
        return 1.0
    denom = beta_denominator(n_models, cfg.beta)
    u = 1.0 - pairwise_agreement(members, cfg.beta) / denom
    return min(1.0, max(0.0, u))


def beta_denominator(n_models: int, beta: float) -> float:
    return beta * n_models + n_models * (n_models - 1)


def score_frame(preds: EnsemblePredictions, cfg: UncertaintyConfig) -> list[tuple[Box3D, float]]:
    """Cluster one frame and pair each representative with its uncertainty."""
    clusters = cluster_predictions(preds, cfg)
    out = []
    for cluster in clusters:
        u = cluster_uncertainty(cluster, preds.n_models, cfg)
        cluster.uncertainty = u
        out.append((cluster.representative, u))
    return out


def export_calibration_stats(scored, ground_truth) -> list[tuple[float, float, float]]:
    """Rows of (score, uncertainty, best iou3d against same-category GT)."""
    rows = []
    for box, u in scored:
        best = 0.0
        for gt in ground_truth:
            if gt.category != box.category:
                continue
            best = max(best, iou3d(box, gt))
        rows.append((float(box.score), float(u), best))
    return rows


def write_calibration_stats(rows, path) -> None:
    with open(path, "w") as handle:
        handle.write(CALIBRATION_CSV_HEADER + "\n")
        for score, u, iou in rows:
            handle.write(f"{score!r},{u!r},{iou!r}\n")
