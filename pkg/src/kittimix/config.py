"""Pipeline configuration: INI-style key-value text, strictly validated.

Sections mirror the library modules. Unknown sections or keys are rejected,
values are range-checked, and every referenced dataset path must exist at
validation time. A minimal config needs only [dataset], [predictions], and
[pipeline] output_root; everything else has defaults:

    [dataset]
    label_dir = ...
    labeled_image_dir = ...
    unlabeled_image_dir = ...
    calib_dir = ...
    # exclude_file = ...          optional, one frame stem per line

    [predictions]
    model_dirs = runs/m0,runs/m1  comma-separated; {stage} substituted

    [pipeline]
    output_root = out

Optional [stageK] sections (K = 1..stage_count) may override conf_thr,
unc_thr, cluster_iou_thr, and beta for a single stage.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .curation import CurationConfig
from .errors import ConfigParseError, ConfigValidationError
from .evaluation import LossConfig
from .kitti_io import load_exclusion_file
from .synthesis import MixConfig
from .uncertainty import UncertaintyConfig

_STAGE_OVERRIDE_KEYS = {"conf_thr", "unc_thr", "cluster_iou_thr", "beta"}

_KNOWN_KEYS = {
    "dataset": {"label_dir", "labeled_image_dir", "unlabeled_image_dir",
                "calib_dir", "exclude_file"},
    "predictions": {"model_dirs"},
    "uncertainty": {"cluster_iou_thr", "beta", "dedupe_same_model"},
    "curation": {"conf_thr", "unc_thr", "categories", "existence_from_raw"},
    "mix": {"p_background", "p_border_cut", "p_color_pad",
            "border_cut_ratio_min", "border_cut_ratio_max",
            "mixup_weight_min", "mixup_weight_max",
            "collision_iou_thr", "max_paste_attempts",
            "k_paste_min", "k_paste_max", "count"},
    "eval": {"iou_thr", "categories", "bev"},
    "loss": {"lambda"},
    "pipeline": {"output_root", "stage_count", "master_seed", "workers"},
}

_REQUIRED = {
    "dataset": {"label_dir", "labeled_image_dir", "unlabeled_image_dir", "calib_dir"},
    "predictions": {"model_dirs"},
    "pipeline": {"output_root"},
}


@dataclass
class PipelineConfig:
    label_dir: Path
    labeled_image_dir: Path
    unlabeled_image_dir: Path
    calib_dir: Path
    model_dirs: list[str]
    output_root: Path
    exclude: frozenset[str] = frozenset()
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval_iou_thr: float = 0.7
    eval_categories: tuple[str, ...] = ("Car",)
    eval_bev: bool = False
    mix_count: int = 100
    stage_count: int = 3
    master_seed: int = 0
    workers: int = 1
    stage_overrides: dict[int, dict[str, float]] = field(default_factory=dict)

    def model_dirs_for_stage(self, stage_index: int) -> list[Path]:
        return [Path(d.replace("{stage}", str(stage_index))) for d in self.model_dirs]

    def uncertainty_for_stage(self, stage_index: int) -> UncertaintyConfig:
        over = self.stage_overrides.get(stage_index, {})
        return UncertaintyConfig(
            cluster_iou_thr=over.get("cluster_iou_thr", self.uncertainty.cluster_iou_thr),
            beta=over.get("beta", self.uncertainty.beta),
            dedupe_same_model=self.uncertainty.dedupe_same_model,
        )

    def curation_for_stage(self, stage_index: int) -> CurationConfig:
        over = self.stage_overrides.get(stage_index, {})
        return CurationConfig(
            conf_thr=over.get("conf_thr", self.curation.conf_thr),
            unc_thr=over.get("unc_thr", self.curation.unc_thr),
            categories=self.curation.categories,
            existence_from_raw=self.curation.existence_from_raw,
        )


class _Reader:
    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    def get(self, section, key, default=None):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key)
        return default

    def real(self, section, key, default, lo=None, hi=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            value = float(raw)
        except ValueError:
            raise ConfigValidationError(f"{section}.{key}", f"not a number: {raw!r}") from None
        if lo is not None and value < lo:
            raise ConfigValidationError(f"{section}.{key}", f"{value} below {lo}")
        if hi is not None and value > hi:
            raise ConfigValidationError(f"{section}.{key}", f"{value} above {hi}")
        return value

    def integer(self, section, key, default, lo=None, hi=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            value = int(raw)
        except ValueError:
            raise ConfigValidationError(f"{section}.{key}", f"not an integer: {raw!r}") from None
        if lo is not None and value < lo:
            raise ConfigValidationError(f"{section}.{key}", f"{value} below {lo}")
        if hi is not None and value > hi:
            raise ConfigValidationError(f"{section}.{key}", f"{value} above {hi}")
        return value

    def boolean(self, section, key, default):
        raw = self.get(section, key)
        if raw is None:
            return default
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigValidationError(f"{section}.{key}", f"not a boolean: {raw!r}")


def _existing_dir(field_name: str, raw: str) -> Path:
    path = Path(raw)
    if not path.is_dir():
        raise ConfigValidationError(field_name, f"directory does not exist: {raw}")
    return path


def validate_config(path) -> PipelineConfig:
    """Parse and validate a config file, filling defaults."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        with open(path, "r") as handle:
            parser.read_file(handle, source=str(path))
    except FileNotFoundError:
        raise
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigParseError(str(path), str(exc)) from None

    stage_sections = {}
    for section in parser.sections():
        if section in _KNOWN_KEYS:
            allowed = _KNOWN_KEYS[section]
        elif section.startswith("stage") and section[5:].isdigit():
            allowed = _STAGE_OVERRIDE_KEYS
            stage_sections[int(section[5:])] = section
        else:
            raise ConfigValidationError(section, "unknown section")
        for key in parser.options(section):
            if key not in allowed:
                raise ConfigValidationError(f"{section}.{key}", "unknown key")
    if parser.defaults():
        key = next(iter(parser.defaults()))
        raise ConfigValidationError(f"DEFAULT.{key}", "unknown key")
    for section, required in _REQUIRED.items():
        if not parser.has_section(section):
            raise ConfigValidationError(section, "required section missing")
        for key in required:
            if not parser.has_option(section, key):
                raise ConfigValidationError(f"{section}.{key}", "required key missing")

    reader = _Reader(parser)

    label_dir = _existing_dir("dataset.label_dir", parser.get("dataset", "label_dir"))
    labeled_image_dir = _existing_dir(
        "dataset.labeled_image_dir", parser.get("dataset", "labeled_image_dir"))
    unlabeled_image_dir = _existing_dir(
        "dataset.unlabeled_image_dir", parser.get("dataset", "unlabeled_image_dir"))
    calib_dir = _existing_dir("dataset.calib_dir", parser.get("dataset", "calib_dir"))

    exclude = frozenset()
    exclude_raw = reader.get("dataset", "exclude_file")
    if exclude_raw is not None:
        if not Path(exclude_raw).is_file():
            raise ConfigValidationError("dataset.exclude_file", f"file does not exist: {exclude_raw}")
        exclude = load_exclusion_file(exclude_raw)

    model_dirs = [d.strip() for d in parser.get("predictions", "model_dirs").split(",") if d.strip()]
    if not model_dirs:
        raise ConfigValidationError("predictions.model_dirs", "needs at least one directory")

    uncertainty = UncertaintyConfig(
        cluster_iou_thr=reader.real("uncertainty", "cluster_iou_thr", 0.5, lo=0.0, hi=1.0),
        beta=reader.real("uncertainty", "beta", 1.0, lo=0.0),
        dedupe_same_model=reader.boolean("uncertainty", "dedupe_same_model", False),
    )
    if uncertainty.beta <= 0.0:
        raise ConfigValidationError("uncertainty.beta", "must be positive")

    categories_raw = reader.get("curation", "categories", "Car,Pedestrian,Cyclist")
    categories = frozenset(c.strip() for c in categories_raw.split(",") if c.strip())
    if not categories:
        raise ConfigValidationError("curation.categories", "needs at least one category")
    curation = CurationConfig(
        conf_thr=reader.real("curation", "conf_thr", 0.7, lo=0.0, hi=1.0),
        unc_thr=reader.real("curation", "unc_thr", 0.25, lo=0.0, hi=1.0),
        categories=categories,
        existence_from_raw=reader.boolean("curation", "existence_from_raw", True),
    )

    border_lo = reader.real("mix", "border_cut_ratio_min", 0.0, lo=0.0, hi=0.3)
    border_hi = reader.real("mix", "border_cut_ratio_max", 0.3, lo=0.0, hi=0.3)
    mix_lo = reader.real("mix", "mixup_weight_min", 0.6, lo=0.6, hi=1.0)
    mix_hi = reader.real("mix", "mixup_weight_max", 1.0, lo=0.6, hi=1.0)
    k_lo = reader.integer("mix", "k_paste_min", 2, lo=0)
    k_hi = reader.integer("mix", "k_paste_max", 6, lo=0)
    for name, lo, hi in (
        ("border_cut_ratio", border_lo, border_hi),
        ("mixup_weight", mix_lo, mix_hi),
        ("k_paste", k_lo, k_hi),
    ):
        if lo > hi:
            raise ConfigValidationError(f"mix.{name}_min", f"{lo} above {name}_max {hi}")
    mix = MixConfig(
        p_background=reader.real("mix", "p_background", 0.42, lo=0.0, hi=1.0),
        p_border_cut=reader.real("mix", "p_border_cut", 0.5, lo=0.0, hi=1.0),
        p_color_pad=reader.real("mix", "p_color_pad", 0.5, lo=0.0, hi=1.0),
        border_cut_ratio_range=(border_lo, border_hi),
        mixup_weight_range=(mix_lo, mix_hi),
        collision_iou_thr=reader.real("mix", "collision_iou_thr", 0.1, lo=0.0, hi=1.0),
        max_paste_attempts=reader.integer("mix", "max_paste_attempts", 8, lo=1),
        k_paste_range=(k_lo, k_hi),
        master_seed=reader.integer("pipeline", "master_seed", 0, lo=0, hi=2 ** 64 - 1),
    )

    eval_categories_raw = reader.get("eval", "categories", "Car")
    eval_categories = tuple(c.strip() for c in eval_categories_raw.split(",") if c.strip())
    if not eval_categories:
        raise ConfigValidationError("eval.categories", "needs at least one category")

    stage_count = reader.integer("pipeline", "stage_count", 3, lo=1)
    overrides: dict[int, dict[str, float]] = {}
    for stage_index, section in sorted(stage_sections.items()):
        if not 1 <= stage_index <= stage_count:
            raise ConfigValidationError(section, f"stage index outside 1..{stage_count}")
        entry = {}
        for key in _STAGE_OVERRIDE_KEYS:
            if parser.has_option(section, key):
                hi = None if key == "beta" else 1.0
                entry[key] = reader.real(section, key, None, lo=0.0, hi=hi)
        overrides[stage_index] = entry

    return PipelineConfig(
        label_dir=label_dir,
        labeled_image_dir=labeled_image_dir,
        unlabeled_image_dir=unlabeled_image_dir,
        calib_dir=calib_dir,
        model_dirs=model_dirs,
        output_root=Path(parser.get("pipeline", "output_root")),
        exclude=exclude,
        uncertainty=uncertainty,
        curation=curation,
        mix=mix,
        loss=LossConfig(lam=reader.real("loss", "lambda", 1.0, lo=0.0)),
        eval_iou_thr=reader.real("eval", "iou_thr", 0.7, lo=0.0, hi=1.0),
        eval_categories=eval_categories,
        eval_bev=reader.boolean("eval", "bev", False),
        mix_count=reader.integer("mix", "count", 100, lo=0),
        stage_count=stage_count,
        master_seed=reader.integer("pipeline", "master_seed", 0, lo=0, hi=2 ** 64 - 1),
        workers=reader.integer("pipeline", "workers", 1, lo=1),
        stage_overrides=overrides,
    )


def canonical_text(cfg: PipelineConfig) -> str:
    """Deterministic flat rendering of the effective config, for hashing."""
    lines = [
        f"dataset.label_dir={cfg.label_dir}",
        f"dataset.labeled_image_dir={cfg.labeled_image_dir}",
        f"dataset.unlabeled_image_dir={cfg.unlabeled_image_dir}",
        f"dataset.calib_dir={cfg.calib_dir}",
        f"dataset.exclude={','.join(sorted(cfg.exclude))}",
        f"predictions.model_dirs={','.join(cfg.model_dirs)}",
        f"uncertainty.cluster_iou_thr={cfg.uncertainty.cluster_iou_thr!r}",
        f"uncertainty.beta={cfg.uncertainty.beta!r}",
        f"uncertainty.dedupe_same_model={cfg.uncertainty.dedupe_same_model}",
        f"curation.conf_thr={cfg.curation.conf_thr!r}",
        f"curation.unc_thr={cfg.curation.unc_thr!r}",
        f"curation.categories={','.join(sorted(cfg.curation.categories))}",
        f"curation.existence_from_raw={cfg.curation.existence_from_raw}",
        f"mix.p_background={cfg.mix.p_background!r}",
        f"mix.p_border_cut={cfg.mix.p_border_cut!r}",
        f"mix.p_color_pad={cfg.mix.p_color_pad!r}",
        f"mix.border_cut_ratio_range={cfg.mix.border_cut_ratio_range!r}",
        f"mix.mixup_weight_range={cfg.mix.mixup_weight_range!r}",
        f"mix.collision_iou_thr={cfg.mix.collision_iou_thr!r}",
        f"mix.max_paste_attempts={cfg.mix.max_paste_attempts}",
        f"mix.k_paste_range={cfg.mix.k_paste_range!r}",
        f"mix.count={cfg.mix_count}",
        f"eval.iou_thr={cfg.eval_iou_thr!r}",
        f"eval.categories={','.join(cfg.eval_categories)}",
        f"eval.bev={cfg.eval_bev}",
        f"loss.lambda={cfg.loss.lam!r}",
        f"pipeline.output_root={cfg.output_root}",
        f"pipeline.stage_count={cfg.stage_count}",
        f"pipeline.master_seed={cfg.master_seed}",
        f"pipeline.workers={cfg.workers}",
    ]
    for stage_index in sorted(cfg.stage_overrides):
        for key in sorted(cfg.stage_overrides[stage_index]):
            value = cfg.stage_overrides[stage_index][key]
            lines.append(f"stage{stage_index}.{key}={value!r}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()
