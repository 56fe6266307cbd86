"""Ensemble pseudo-label curation and mixed-image synthesis for KITTI-format
3D detection data.

The library covers the data side of a self-training loop: score ensemble
predictions by cross-model agreement, filter them by confidence and
uncertainty, bank the survivors as image patches, and synthesize mixed
training images by pasting patches onto labeled and background frames.
Detector training itself is out of scope; predictions arrive as files.
"""

__version__ = "0.1.0"

from .curation import (
    BackgroundDatabase, CurationConfig, InstanceDatabase, InstanceRecord,
    apply_filters, build_background_database, build_instance_database,
    confidence_filter, object_existence_filter, uncertainty_filter,
)
from .evaluation import (
    EvalConfig, LossConfig, PerBoxLoss, ap40, match_predictions,
    pseudo_label_pr, supervised_loss, total_loss, unsupervised_loss,
)
from .geometry import (
    Box3D, CameraProjection, bev_polygon, box_corners, iou2d, iou3d, iou_bev,
    polygon_area, polygon_intersection_area, project_to_image,
)
from .kitti_io import (
    DatasetManifest, Frame, parse_calib, parse_label_file, parse_label_line,
    scan_dataset, write_label_file,
)
from .synthesis import (
    MixConfig, MixedSample, border_cut, collision_test, color_pad,
    compose_mixed_image, derive_sample_seed, generate_epoch, mixup_blend,
    sample_target,
)
from .uncertainty import (
    Cluster, EnsemblePredictions, UncertaintyConfig, cluster_predictions,
    cluster_uncertainty, score_frame,
)

__all__ = [name for name in dir() if not name.startswith("_")]
