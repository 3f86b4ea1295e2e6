"""Training-target encoding: Gaussian heatmaps, box regressions and multi-bin angles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..kitti import Frame, project_to_image, wrap_angle
from .model import NUM_BINS, STRIDE, DetectorConfig, RoiBatch

BIN_WIDTH = 2 * math.pi / NUM_BINS


def bin_centers(num_bins: int = NUM_BINS) -> np.ndarray:
    return 2 * np.pi * np.arange(num_bins) / num_bins - np.pi


def encode_angle(alpha: float, num_bins: int = NUM_BINS) -> tuple[int, float]:
    """Hard bin assignment plus in-bin residual; boundary ties go to the lower index."""
    width = 2 * math.pi / num_bins
    t = (wrap_angle(alpha) + math.pi) / width
    lower = math.floor(t)
    frac = t - lower
    if frac < 0.5:
        idx = lower % num_bins
    elif frac > 0.5:
        idx = (lower + 1) % num_bins
    else:
        idx = min(lower % num_bins, (lower + 1) % num_bins)
    center = 2 * math.pi * idx / num_bins - math.pi
    return idx, wrap_angle(alpha - center)


def decode_angle(bin_index: int, residual: float, num_bins: int = NUM_BINS) -> float:
    return wrap_angle(2 * math.pi * bin_index / num_bins - math.pi + residual)


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CenterNet radius so a corner-shifted box keeps IoU >= min_overlap."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * c1)) / 2
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2**2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    ys, xs = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    h, w = heatmap.shape
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    patch = heatmap[cy - top : cy + bottom, cx - left : cx + right]
    np.maximum(patch, g[radius - top : radius + bottom, radius - left : radius + right], out=patch)


@dataclass
class TrainTargets:
    heatmap: torch.Tensor  # (B, 1, Hf, Wf)
    mask: torch.Tensor  # (B, M) bool
    cells: torch.Tensor  # (B, M, 2) long (x, y)
    offset2d: torch.Tensor  # (B, M, 2)
    box2d: torch.Tensor  # (B, M, 4) feature coordinates
    offset3d: torch.Tensor  # (B, M, 2)
    size3d: torch.Tensor  # (B, M, 3)
    orient_bin: torch.Tensor  # (B, M) long
    orient_residual: torch.Tensor  # (B, M)
    depth: torch.Tensor  # (B, M)

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())

    def rois(self) -> RoiBatch:
        """Ground-truth RoIs, batch-major, in the order losses expect."""
        b, m = self.mask.shape
        bidx = torch.arange(b).repeat_interleave(m)[self.mask.reshape(-1)]
        return RoiBatch(
            batch_index=bidx,
            boxes=self.box2d[self.mask],
            cells=self.cells[self.mask],
        )

    def to(self, dtype) -> "TrainTargets":
        kw = {}
        for name, value in self.__dict__.items():
            kw[name] = value.to(dtype) if value.is_floating_point() else value
        return TrainTargets(**kw)

    def select(self, index) -> "TrainTargets":
        return TrainTargets(**{k: v[index] for k, v in self.__dict__.items()})


def _frame_arrays(frame: Frame, config: DetectorConfig, max_objects: int):
    hf, wf = frame.height // STRIDE, frame.width // STRIDE
    heatmap = np.zeros((hf, wf))
    out = {
        "mask": np.zeros(max_objects, dtype=bool),
        "cells": np.zeros((max_objects, 2), dtype=np.int64),
        "offset2d": np.zeros((max_objects, 2)),
        "box2d": np.tile(np.array([0.0, 0.0, 1.0, 1.0]), (max_objects, 1)),
        "offset3d": np.zeros((max_objects, 2)),
        "size3d": np.zeros((max_objects, 3)),
        "orient_bin": np.zeros(max_objects, dtype=np.int64),
        "orient_residual": np.zeros(max_objects),
        "depth": np.ones(max_objects),
    }
    mean_dims = np.asarray(config.mean_dims)
    slot = 0
    for obj in frame.cars():
        left, top, right, bottom = (v / STRIDE for v in obj.box2d)
        if right - left <= 0 or bottom - top <= 0:
            continue
        cx, cy = (left + right) / 2, (top + bottom) / 2
        ix, iy = min(int(cx), wf - 1), min(int(cy), hf - 1)
        radius = max(1, int(gaussian_radius(bottom - top, right - left)))
        draw_gaussian(heatmap, ix, iy, radius)
        if slot >= max_objects:
            continue
        u, v = project_to_image(obj.center3d(), frame.calib)
        idx, res = encode_angle(obj.alpha, config.num_bins)
        out["mask"][slot] = True
        out["cells"][slot] = (ix, iy)
        out["offset2d"][slot] = (cx - ix, cy - iy)
        out["box2d"][slot] = (left, top, right, bottom)
        out["offset3d"][slot] = (u / STRIDE - ix, v / STRIDE - iy)
        out["size3d"][slot] = np.asarray(obj.dims) - mean_dims
        out["orient_bin"][slot] = idx
        out["orient_residual"][slot] = res
        out["depth"][slot] = obj.location[2]
        slot += 1
    return heatmap, out


def build_targets(frames: Sequence[Frame], config: DetectorConfig, max_objects: int = 8, dtype=torch.float32) -> TrainTargets:
    heatmaps, per_frame = [], []
    for frame in frames:
        hm, arrays = _frame_arrays(frame, config, max_objects)
        heatmaps.append(hm)
        per_frame.append(arrays)

    def stack(key, tdtype):
        return torch.as_tensor(np.stack([a[key] for a in per_frame]), dtype=tdtype)

    return TrainTargets(
        heatmap=torch.as_tensor(np.stack(heatmaps)[:, None], dtype=dtype),
        mask=stack("mask", torch.bool),
        cells=stack("cells", torch.long),
        offset2d=stack("offset2d", dtype),
        box2d=stack("box2d", dtype),
        offset3d=stack("offset3d", dtype),
        size3d=stack("size3d", dtype),
        orient_bin=stack("orient_bin", torch.long),
        orient_residual=stack("orient_residual", dtype),
        depth=stack("depth", dtype),
    )


def collate_targets(targets: Sequence[TrainTargets]) -> TrainTargets:
    return TrainTargets(**{k: torch.cat([getattr(t, k) for t in targets]) for k in targets[0].__dict__})


def images_to_tensor(frames: Sequence[Frame], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([f.image for f in frames]), dtype=dtype).permute(0, 3, 1, 2).contiguous()
