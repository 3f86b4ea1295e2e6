"""Detection losses: heatmap focal, L1 box terms, GIoU, multi-bin angle and Laplace depth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..errors import NumericError
from .model import DetectorOutputs
from .targets import TrainTargets

SQRT2 = math.sqrt(2.0)


def _check_finite(*tensors: torch.Tensor, name: str) -> None:
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise NumericError(f"non-finite input to {name}")


def focal_heatmap_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced pixel focal loss, normalised by the number of positives."""
    _check_finite(pred, target, name="focal_heatmap_loss")
    eps = 1e-12 if pred.dtype == torch.float64 else 1e-6
    pred = pred.clamp(eps, 1 - eps)
    pos = target.eq(1).to(pred.dtype)
    neg = 1.0 - pos
    pos_loss = torch.log(pred) * (1 - pred) ** alpha * pos
    neg_loss = torch.log(1 - pred) * pred**alpha * (1 - target) ** beta * neg
    num_pos = pos.sum()
    total = pos_loss.sum() + neg_loss.sum()
    return -total / num_pos.clamp(min=1.0)


def giou_loss(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    """Elementwise ``1 - GIoU`` for ``(..., 4)`` boxes in (left, top, right, bottom) form."""
    pw = (pred_box[..., 2] - pred_box[..., 0]).clamp(min=0)
    ph = (pred_box[..., 3] - pred_box[..., 1]).clamp(min=0)
    gw = (gt_box[..., 2] - gt_box[..., 0]).clamp(min=0)
    gh = (gt_box[..., 3] - gt_box[..., 1]).clamp(min=0)
    iw = (torch.minimum(pred_box[..., 2], gt_box[..., 2]) - torch.maximum(pred_box[..., 0], gt_box[..., 0])).clamp(min=0)
    ih = (torch.minimum(pred_box[..., 3], gt_box[..., 3]) - torch.maximum(pred_box[..., 1], gt_box[..., 1])).clamp(min=0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    cw = torch.maximum(pred_box[..., 2], gt_box[..., 2]) - torch.minimum(pred_box[..., 0], gt_box[..., 0])
    ch = torch.maximum(pred_box[..., 3], gt_box[..., 3]) - torch.minimum(pred_box[..., 1], gt_box[..., 1])
    enclose = cw * ch
    iou = torch.where(union > 0, inter / torch.where(union > 0, union, torch.ones_like(union)), torch.zeros_like(union))
    safe_enclose = torch.where(enclose > 0, enclose, torch.ones_like(enclose))
    giou = iou - torch.where(enclose > 0, (enclose - union) / safe_enclose, torch.zeros_like(enclose))
    return 1.0 - giou


def multibin_orientation_loss(
    orient_logits: torch.Tensor,
    orient_residuals: torch.Tensor,
    target_bin: torch.Tensor,
    target_residual: torch.Tensor,
) -> torch.Tensor:
    """Per-object cross-entropy on the target bin plus L1 on that bin's residual."""
    ce = F.cross_entropy(orient_logits, target_bin, reduction="none")
    res = orient_residuals.gather(1, target_bin[:, None]).squeeze(1)
    return ce + (res - target_residual).abs()


def depth_laplace_loss(depth_mean: torch.Tensor, depth_log_sigma: torch.Tensor, d_gt: torch.Tensor) -> torch.Tensor:
    """Laplace negative log-likelihood (without the constant), elementwise."""
    return SQRT2 * torch.exp(-depth_log_sigma) * (depth_mean - d_gt).abs() + depth_log_sigma


@dataclass
class LossBreakdown:
    heatmap: torch.Tensor
    offset2d: torch.Tensor
    size2d: torch.Tensor
    offset3d: torch.Tensor
    size3d: torch.Tensor
    orientation: torch.Tensor
    depth: torch.Tensor

    @property
    def loss_2d(self) -> torch.Tensor:
        return self.heatmap + self.offset2d + self.size2d

    @property
    def loss_3d(self) -> torch.Tensor:
        return self.offset3d + self.size3d + self.orientation

    @property
    def loss_depth(self) -> torch.Tensor:
        return self.depth

    @property
    def total(self) -> torch.Tensor:
        return self.loss_2d + self.loss_3d + self.loss_depth

    def head(self, name: str) -> torch.Tensor:
        return {"2d": self.loss_2d, "3d": self.loss_3d, "depth": self.loss_depth, "total": self.total}[name]

    def as_floats(self) -> dict:
        return {
            "loss_2d": float(self.loss_2d.detach()),
            "loss_3d": float(self.loss_3d.detach()),
            "loss_depth": float(self.loss_depth.detach()),
            "loss_total": float(self.total.detach()),
        }


def composite_detection_loss(outputs: DetectorOutputs, targets: TrainTargets) -> LossBreakdown:
    """All seven loss terms; object terms are means over valid objects.

    ``outputs`` must come from a forward pass on ``targets.rois()``.
    """
    l_heat = focal_heatmap_loss(outputs.heatmap, targets.heatmap)
    zero = outputs.heatmap.sum() * 0.0
    mask = targets.mask
    n = int(mask.sum())
    if n == 0:
        return LossBreakdown(l_heat, zero, zero, zero, zero, zero, zero)
    if len(outputs.rois) != n:
        raise ValueError(f"outputs carry {len(outputs.rois)} RoIs, targets have {n} objects")

    b, m = mask.shape
    bidx = torch.arange(b)[:, None].expand(b, m)[mask]
    cells = targets.cells[mask]
    xs, ys = cells[:, 0], cells[:, 1]
    off_pred = outputs.offset2d[bidx, :, ys, xs]
    size_pred = outputs.size2d[bidx, :, ys, xs]
    ctr = cells.to(off_pred.dtype) + off_pred
    box_pred = torch.cat([ctr - size_pred / 2, ctr + size_pred / 2], dim=-1)

    l_off2d = (off_pred - targets.offset2d[mask]).abs().sum(-1).mean()
    l_size2d = giou_loss(box_pred, targets.box2d[mask]).mean()
    l_off3d = (outputs.offset3d - targets.offset3d[mask]).abs().sum(-1).mean()
    l_size3d = (outputs.size3d - targets.size3d[mask]).abs().sum(-1).mean()
    l_orient = multibin_orientation_loss(
        outputs.orient_logits, outputs.orient_residuals, targets.orient_bin[mask], targets.orient_residual[mask]
    ).mean()
    l_depth = depth_laplace_loss(outputs.depth_mean, outputs.depth_log_sigma, targets.depth[mask]).mean()
    return LossBreakdown(l_heat, l_off2d, l_size2d, l_off3d, l_size3d, l_orient, l_depth)
