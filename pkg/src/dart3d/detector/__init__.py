from .decode import Detection, decode_detections
from .losses import (
    LossBreakdown,
    composite_detection_loss,
    depth_laplace_loss,
    focal_heatmap_loss,
    giou_loss,
    multibin_orientation_loss,
)
from .model import STRIDE, DetectorConfig, DetectorOutputs, MonoDetector, RoiBatch, roi_align
from .targets import TrainTargets, build_targets, decode_angle, encode_angle, images_to_tensor

__all__ = [
    "STRIDE",
    "Detection",
    "DetectorConfig",
    "DetectorOutputs",
    "LossBreakdown",
    "MonoDetector",
    "RoiBatch",
    "TrainTargets",
    "build_targets",
    "composite_detection_loss",
    "decode_angle",
    "decode_detections",
    "depth_laplace_loss",
    "encode_angle",
    "focal_heatmap_loss",
    "giou_loss",
    "images_to_tensor",
    "multibin_orientation_loss",
    "roi_align",
]
