"""Detection metrics and loss aggregation.

AP is computed at 40 recall positions k/40, k = 1..40, with max-interpolated
precision, averaged and scaled to [0, 100]. Matching is greedy in descending
score order: each prediction takes the unmatched ground-truth box of highest
IoU, counting as a true positive when that IoU reaches the threshold.

Loss aggregation sums per-image means: the supervised term over labeled
images, the unsupervised term over pseudo-labeled images grouped by target
kind (labeled-frame targets and background-frame targets), combined as
L = L_s + lambda * L_u. Images with zero boxes contribute nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, iou3d, iou_bev

logger = logging.getLogger(__name__)

RECALL_POINTS = 40

# KITTI difficulty gates: (min 2D box height px, max occlusion, max truncation)
DIFFICULTY_GATES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}

EVAL_REPORT_HEADER = "kittimix-eval-report v1"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0


@dataclass(frozen=True)
class PerBoxLoss:
    cls: float
    reg: float

    @property
    def total(self) -> float:
        return self.cls + self.reg


def _group_loss(per_image) -> float:
    total = 0.0
    for boxes in per_image:
        if not boxes:
            continue
        total += sum(b.total for b in boxes) / len(boxes)
    return total


def supervised_loss(per_image) -> float:
    """Sum over images of the mean per-box (cls + reg) loss."""
    return _group_loss(per_image)


def unsupervised_loss(per_labeled_target, per_background_target) -> float:
    """Pseudo-label loss: the two target-kind groups aggregated separately."""
    return _group_loss(per_labeled_target) + _group_loss(per_background_target)


def total_loss(supervised: float, unsupervised: float, cfg: LossConfig) -> float:
    return supervised + cfg.lam * unsupervised


@dataclass(frozen=True)
class EvalConfig:
    iou_thr: float = 0.7
    category: str | None = None
    difficulty: str | None = None
    bev: bool = False
    recall_points: int = RECALL_POINTS


def difficulty_gate(box: Box3D, level: str) -> bool:
    """KITTI-style stratum membership test for a ground-truth box."""
    min_height, max_occlusion, max_truncation = DIFFICULTY_GATES[level]
    if box.bbox2d is None:
        return False
    height = box.bbox2d[3] - box.bbox2d[1]
    return (
        height >= min_height
        and box.occluded <= max_occlusion
        and box.truncated <= max_truncation
    )


def _select(boxes, category, difficulty=None):
    out = []
    for b in boxes:
        if category is not None and b.category != category:
            continue
        if difficulty is not None and not difficulty_gate(b, difficulty):
            continue
        out.append(b)
    return out


def match_predictions(predictions, ground_truth, cfg: EvalConfig):
    """Greedy one-to-one matching; returns (prediction, gt-or-None) pairs
    in descending score order. Callers pre-filter to one frame and category.
    """
    iou_fn = iou_bev if cfg.bev else iou3d
    order = sorted(range(len(predictions)),
                   key=lambda i: (-(predictions[i].score or 0.0), i))
    taken = [False] * len(ground_truth)
    pairs = []
    for i in order:
        pred = predictions[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(ground_truth):
            if taken[j]:
                continue
            iou = iou_fn(pred, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= cfg.iou_thr:
            taken[best_j] = True
            pairs.append((pred, ground_truth[best_j]))
        else:
            pairs.append((pred, None))
    return pairs


def ap40(frames, cfg: EvalConfig) -> float:
    """Average precision over 40 recall points, in [0, 100].

    frames is a list of (predictions, ground_truth) pairs, one per image.
    No ground truth anywhere returns 0 with a warning.
    """
    scores: list[float] = []
    hits: list[bool] = []
    n_gt = 0
    for predictions, ground_truth in frames:
        preds = _select(predictions, cfg.category)
        gts = _select(ground_truth, cfg.category, cfg.difficulty)
        n_gt += len(gts)
        for pred, matched in match_predictions(preds, gts, cfg):
            scores.append(pred.score or 0.0)
            hits.append(matched is not None)
    if n_gt == 0:
        logger.warning("ap40: no ground truth for category %r", cfg.category)
        return 0.0
    if not scores:
        return 0.0

    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.cumsum(np.asarray(hits, dtype=np.int64)[order])
    fp = np.cumsum(~np.asarray(hits, dtype=bool)[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)

    total = 0.0
    for k in range(1, cfg.recall_points + 1):
        r = k / cfg.recall_points
        reachable = precision[recall >= r]
        total += float(reachable.max()) if reachable.size else 0.0
    return total / cfg.recall_points * 100.0


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    true_positives: int
    n_predicted: int
    n_ground_truth: int

    @property
    def vacuous(self) -> bool:
        return self.n_predicted == 0 or self.n_ground_truth == 0


def pseudo_label_pr(frames, iou_thr: float, bev: bool = False) -> PrecisionRecall:
    """Precision/recall of pseudo labels against ground truth.

    frames is a list of (pseudo_boxes, gt_boxes) pairs; matching is per frame
    and per category. Empty pseudo sets give precision 1 and empty ground
    truth gives recall 1 (vacuous truth, logged).
    """
    cfg = EvalConfig(iou_thr=iou_thr, bev=bev)
    tp = 0
    n_pred = 0
    n_gt = 0
    for pseudo, gts in frames:
        n_pred += len(pseudo)
        n_gt += len(gts)
        for category in sorted({b.category for b in pseudo}):
            pairs = match_predictions(
                _select(pseudo, category), _select(gts, category), cfg)
            tp += sum(1 for _, matched in pairs if matched is not None)
    if n_pred == 0:
        logger.warning("pseudo_label_pr: no pseudo labels, precision vacuously 1")
    if n_gt == 0:
        logger.warning("pseudo_label_pr: no ground truth, recall vacuously 1")
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_gt if n_gt else 1.0
    return PrecisionRecall(precision, recall, tp, n_pred, n_gt)


def write_eval_report(lines, path_or_handle) -> None:
    """Write a line-oriented metrics report with the schema header."""
    text = EVAL_REPORT_HEADER + "\n" + "".join(line + "\n" for line in lines)
    if hasattr(path_or_handle, "write"):
        path_or_handle.write(text)
    else:
        with open(path_or_handle, "w") as handle:
            handle.write(text)
