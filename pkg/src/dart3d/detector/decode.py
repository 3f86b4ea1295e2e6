from __future__ import annotations

import numpy as np
import torch

from ..kitti import CameraCalibration, ObjectLabel, alpha_to_rotation_y, backproject
from .model import STRIDE, DetectorOutputs, select_peaks
from .targets import decode_angle

Detection = ObjectLabel


def decode_detections(
    outputs: DetectorOutputs,
    calib: CameraCalibration,
    k_max: int = 20,
    threshold: float = 0.1,
    mean_dims=(1.51, 1.68, 4.0),
    batch_index: int = 0,
    image_size: tuple | None = None,
) -> list[ObjectLabel]:
    """Turn raw head outputs for one image into scored ``ObjectLabel`` detections.

    Peaks need a matching entry in ``outputs.rois``; peaks without one are
    skipped, so ``k_max`` should not exceed the forward pass's ``top_k``.
    """
    heatmap = outputs.heatmap[batch_index : batch_index + 1].detach()
    _, _, hf, wf = heatmap.shape
    img_h, img_w = image_size or (hf * STRIDE, wf * STRIDE)
    scores, xs, ys = select_peaks(heatmap, k_max)
    scores, xs, ys = scores[0].tolist(), xs[0].tolist(), ys[0].tolist()

    rois = outputs.rois
    lookup = {}
    for i, (b, (cx, cy)) in enumerate(zip(rois.batch_index.tolist(), rois.cells.tolist())):
        if b == batch_index:
            lookup.setdefault((cx, cy), i)

    detections = []
    mean_dims = np.asarray(mean_dims, dtype=np.float64)
    for score, x, y in zip(scores, xs, ys):
        if not score > threshold:
            continue
        i = lookup.get((x, y))
        if i is None:
            continue
        off = outputs.offset2d[batch_index, :, y, x].detach().double().numpy()
        size = outputs.size2d[batch_index, :, y, x].detach().double().numpy()
        cx, cy = (x + off[0]) * STRIDE, (y + off[1]) * STRIDE
        half_w, half_h = size[0] * STRIDE / 2, size[1] * STRIDE / 2
        box2d = (
            min(max(cx - half_w, 0.0), img_w),
            min(max(cy - half_h, 0.0), img_h),
            min(max(cx + half_w, 0.0), img_w),
            min(max(cy + half_h, 0.0), img_h),
        )
        off3d = outputs.offset3d[i].detach().double().numpy()
        depth = float(outputs.depth_mean[i])
        center = backproject((x + off3d[0]) * STRIDE, (y + off3d[1]) * STRIDE, depth, calib)
        dims = mean_dims + outputs.size3d[i].detach().double().numpy()
        dims = np.maximum(dims, 1e-2)
        location = center + np.array([0.0, dims[0] / 2, 0.0])
        b = int(torch.argmax(outputs.orient_logits[i]))
        alpha = decode_angle(b, float(outputs.orient_residuals[i, b]), outputs.orient_logits.shape[1])
        detections.append(
            ObjectLabel(
                class_name="Car",
                truncation=0.0,
                occlusion=0,
                alpha=alpha,
                box2d=box2d,
                dims=tuple(dims),
                location=tuple(location),
                rotation_y=alpha_to_rotation_y(alpha, location[0], location[2]),
                score=float(score),
            )
        )
    return detections
