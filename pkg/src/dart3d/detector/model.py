"""Keypoint-based monocular 3D detector with RoIAlign-cropped 3D heads."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError

STRIDE = 4
NUM_BINS = 12
GEOM_FEATURES = 8


@dataclass
class DetectorConfig:
    channels: tuple = (16, 32, 64)
    head_channels: int = 32
    roi_size: int = 7
    roi_hidden: int = 128
    top_k: int = 20
    num_bins: int = NUM_BINS
    mean_dims: tuple = (1.51, 1.68, 4.0)
    pixel_mean: tuple = (128.0, 128.0, 128.0)
    pixel_std: tuple = (64.0, 64.0, 64.0)
    heatmap_bias: float = -2.19
    size_init: float = 4.0  # initial 2D size prediction, feature cells
    depth_init: float = 15.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (list, tuple)):
                setattr(self, f.name, tuple(v if isinstance(v, int) else float(v) for v in value))

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RoiBatch:
    """RoIs in feature coordinates with the keypoint cell that spawned each."""

    batch_index: torch.Tensor  # (K,) long
    boxes: torch.Tensor  # (K, 4) left, top, right, bottom
    cells: torch.Tensor  # (K, 2) long, (x, y)
    scores: Optional[torch.Tensor] = None  # (K,) heatmap peak values when decoded

    def __len__(self) -> int:
        return int(self.batch_index.shape[0])


@dataclass
class DetectorOutputs:
    heatmap: torch.Tensor  # (B, 1, H/4, W/4), post-sigmoid
    offset2d: torch.Tensor  # (B, 2, H/4, W/4)
    size2d: torch.Tensor  # (B, 2, H/4, W/4), feature cells
    rois: RoiBatch
    offset3d: torch.Tensor  # (K, 2) projected 3D centre minus keypoint cell
    size3d: torch.Tensor  # (K, 3) residual to mean dims (h, w, l)
    orient_logits: torch.Tensor  # (K, bins)
    orient_residuals: torch.Tensor  # (K, bins)
    depth_mean: torch.Tensor  # (K,)
    depth_log_sigma: torch.Tensor  # (K,)
    extras: dict = field(default_factory=dict)


def _roi_sample_grid(boxes: torch.Tensor, out: int):
    left, top, right, bottom = boxes.unbind(-1)
    steps = (torch.arange(out, dtype=boxes.dtype, device=boxes.device) + 0.5) / out
    xs = left[:, None] + steps[None, :] * (right - left)[:, None]
    ys = top[:, None] + steps[None, :] * (bottom - top)[:, None]
    return xs, ys


def roi_align(features: torch.Tensor, rois, out: int = 7, batch_index: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Bilinear RoIAlign with one sample at each output cell centre.

    ``features`` is ``(C, h, w)`` with a single ``(left, top, right, bottom)``
    roi, or ``(B, C, h, w)`` with ``(K, 4)`` rois and a ``(K,)`` batch index.
    Feature cell ``k`` is centred at coordinate ``k + 0.5``; samples outside
    the map are clamped to the border.
    """
    single = features.dim() == 3
    if single:
        features = features.unsqueeze(0)
        rois = torch.as_tensor(rois, dtype=features.dtype).reshape(1, 4)
        batch_index = torch.zeros(1, dtype=torch.long)
    rois = rois.to(features.dtype)
    if batch_index is None:
        raise ShapeError("batched roi_align needs batch_index")
    if rois.numel() and bool(((rois[:, 2] <= rois[:, 0]) | (rois[:, 3] <= rois[:, 1])).any()):
        raise ShapeError("degenerate roi: right <= left or bottom <= top")
    b, c, h, w = features.shape
    k = rois.shape[0]
    xs, ys = _roi_sample_grid(rois, out)
    xs = (xs - 0.5).clamp(0, w - 1)
    ys = (ys - 0.5).clamp(0, h - 1)
    x0 = xs.detach().floor().long().clamp(max=w - 1)
    y0 = ys.detach().floor().long().clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = (xs - x0.to(xs.dtype))[:, None, :]  # (K, 1, out)
    wy = (ys - y0.to(ys.dtype))[:, :, None]  # (K, out, 1)

    flat = features.permute(0, 2, 3, 1).reshape(b * h * w, c)
    base = (batch_index.long() * h * w)[:, None, None]

    def gather(yi, xi):
        idx = base + yi[:, :, None] * w + xi[:, None, :]
        return flat[idx.reshape(-1)].reshape(k, out, out, c)

    wx4, wy4 = wx[..., None], wy[..., None]
    val = (
        gather(y0, x0) * (1 - wy4) * (1 - wx4)
        + gather(y0, x1) * (1 - wy4) * wx4
        + gather(y1, x0) * wy4 * (1 - wx4)
        + gather(y1, x1) * wy4 * wx4
    )
    val = val.permute(0, 3, 1, 2)
    return val[0] if single else val


def roi_geometry(boxes: torch.Tensor, cells: torch.Tensor, feat_h: int, feat_w: int) -> torch.Tensor:
    """Per-RoI position/scale descriptor fed to the 3D heads."""
    left, top, right, bottom = boxes.unbind(-1)
    bw = (right - left).clamp(min=1e-3)
    bh = (bottom - top).clamp(min=1e-3)
    cx = (left + right) / 2
    cy = (top + bottom) / 2
    cells = cells.to(boxes.dtype)
    return torch.stack(
        [
            cx / feat_w,
            cy / feat_h,
            bw / feat_w,
            bh / feat_h,
            cx - cells[:, 0],
            cy - cells[:, 1],
            torch.log(4.0 / bh),
            torch.log(4.0 / bw),
        ],
        dim=-1,
    )


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation), nn.ReLU())


def select_peaks(heatmap: torch.Tensor, k: int):
    """3x3 local-max suppression then top-k per image. Returns (scores, xs, ys), each (B, k)."""
    b, _, h, w = heatmap.shape
    pooled = F.max_pool2d(heatmap, 3, stride=1, padding=1)
    keep = (pooled == heatmap).to(heatmap.dtype)
    flat = (heatmap * keep).reshape(b, -1)
    k = min(k, h * w)
    scores, idx = torch.topk(flat, k, dim=1)
    return scores, idx % w, idx // w


class MonoDetector(nn.Module):
    """Small strided CNN (output stride 4) with CenterNet 2D heads and RoI 3D heads.

    Inputs are raw ``[0, 255]`` images of shape ``(B, 3, H, W)``; pixel
    normalization happens inside. When ``rois`` is omitted the RoI heads run
    on the top-k heatmap peaks with boxes from the predicted 2D offset/size.
    """

    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = cfg = config or DetectorConfig()
        c1, c2, c3 = cfg.channels
        self.register_buffer("pixel_mean", torch.tensor(cfg.pixel_mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(cfg.pixel_std, dtype=torch.float32).view(1, 3, 1, 1))

        self.stem = nn.Sequential(_conv(3, c1, 2), _conv(c1, c2, 2), _conv(c2, c2))
        self.down = nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3, dilation=2))
        self.lateral = nn.Conv2d(c3, c2, 1)
        self.fuse = _conv(c2, c2)

        hc = cfg.head_channels
        self.head_body = _conv(c2, hc)
        self.heatmap_head = nn.Conv2d(hc, 1, 1)
        self.box2d_head = nn.Conv2d(hc, 4, 1)  # offset x, y, log size w, h

        roi_in = c2 * cfg.roi_size * cfg.roi_size
        self.roi_fc1 = nn.Linear(roi_in + GEOM_FEATURES, cfg.roi_hidden)
        self.roi_fc2 = nn.Linear(cfg.roi_hidden + GEOM_FEATURES, cfg.roi_hidden)
        # offset3d(2) size3d(3) logits(k) residuals(k) depth(1) log_sigma(1)
        self.roi_out = nn.Linear(cfg.roi_hidden + GEOM_FEATURES, 2 + 3 + 2 * cfg.num_bins + 2)
        self.reset_heads()

    def reset_heads(self):
        cfg = self.config
        nn.init.constant_(self.heatmap_head.bias, cfg.heatmap_bias)
        with torch.no_grad():
            self.box2d_head.bias.copy_(torch.tensor([0.5, 0.5, math.log(cfg.size_init), math.log(cfg.size_init)]))
            self.roi_out.weight.mul_(0.1)
            self.roi_out.bias.zero_()
            self.roi_out.bias[-2] = math.log(cfg.depth_init)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] % STRIDE or images.shape[3] % STRIDE:
            raise ShapeError(f"image size {tuple(images.shape[2:])} not divisible by {STRIDE}")
        x = (images - self.pixel_mean) / self.pixel_std
        f4 = self.stem(x)
        f8 = self.down(f4)
        up = F.interpolate(self.lateral(f8), size=f4.shape[-2:], mode="bilinear", align_corners=False)
        return self.fuse(f4 + up)

    def decode_rois(self, heatmap, offset2d, size2d, k: int) -> RoiBatch:
        b = heatmap.shape[0]
        scores, xs, ys = select_peaks(heatmap.detach(), k)
        k = scores.shape[1]
        bidx = torch.arange(b).repeat_interleave(k)
        xs, ys = xs.reshape(-1), ys.reshape(-1)
        off = offset2d[bidx, :, ys, xs]
        size = size2d[bidx, :, ys, xs]
        cx = xs.to(off.dtype) + off[:, 0]
        cy = ys.to(off.dtype) + off[:, 1]
        boxes = torch.stack([cx - size[:, 0] / 2, cy - size[:, 1] / 2, cx + size[:, 0] / 2, cy + size[:, 1] / 2], -1)
        return RoiBatch(bidx, boxes, torch.stack([xs, ys], -1), scores.reshape(-1))

    def forward(self, images: torch.Tensor, rois: RoiBatch | None = None) -> DetectorOutputs:
        cfg = self.config
        feats = self.features(images)
        body = self.head_body(feats)
        heatmap = torch.sigmoid(self.heatmap_head(body))
        box = self.box2d_head(body)
        offset2d = box[:, :2]
        size2d = torch.exp(box[:, 2:].clamp(-8.0, 8.0))

        if rois is None:
            rois = self.decode_rois(heatmap, offset2d, size2d, cfg.top_k)
        h, w = feats.shape[-2:]
        crops = roi_align(feats, rois.boxes, cfg.roi_size, rois.batch_index)
        geom = roi_geometry(rois.boxes, rois.cells, h, w)
        hidden = F.relu(self.roi_fc1(torch.cat([crops.flatten(1), geom], -1)))
        hidden = F.relu(self.roi_fc2(torch.cat([hidden, geom], -1)))
        out = self.roi_out(torch.cat([hidden, geom], -1))
        nb = cfg.num_bins
        return DetectorOutputs(
            heatmap=heatmap,
            offset2d=offset2d,
            size2d=size2d,
            rois=rois,
            offset3d=out[:, 0:2],
            size3d=out[:, 2:5],
            orient_logits=out[:, 5 : 5 + nb],
            orient_residuals=out[:, 5 + nb : 5 + 2 * nb],
            depth_mean=torch.exp(out[:, -2].clamp(max=6.0)),
            depth_log_sigma=out[:, -1],
        )
