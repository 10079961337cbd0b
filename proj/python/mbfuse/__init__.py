"""Multispectral pedestrian detection with differential modality fusion."""

from ._core import (
    Error,
    ParseError,
    ShapeError,
    align,
    decompose_modalities,
    desk_config,
    dmaf_weights,
    focal_loss,
    fuse_scores,
    gen_anchors,
    gradient_suite,
    illum_reweight,
    iou,
    log_avg_mr,
    synth_generate,
    train,
)

__all__ = [
    "Error",
    "ParseError",
    "ShapeError",
    "align",
    "decompose_modalities",
    "desk_config",
    "dmaf_weights",
    "focal_loss",
    "fuse_scores",
    "gen_anchors",
    "gradient_suite",
    "illum_reweight",
    "iou",
    "log_avg_mr",
    "synth_generate",
    "train",
]
