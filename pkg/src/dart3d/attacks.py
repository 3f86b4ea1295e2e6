"""White-box L-infinity gradient-sign attacks on the detector.

All budgets are in raw pixel units on the [0, 255] scale. Every attack returns
``(adv_images, delta)`` with ``adv_images = clip(images + delta, 0, 255)`` and
``|delta| <= epsilon`` elementwise.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .detector.losses import composite_detection_loss
from .detector.model import DetectorOutputs, RoiBatch
from .detector.targets import TrainTargets
from .errors import NumericError, ShapeError


class AttackKind(str, enum.Enum):
    FGSM = "FGSM"
    BIM = "BIM"
    PGD = "PGD"
    MIFGSM = "MIFGSM"
    IDP = "IDP"


class LossHead(str, enum.Enum):
    TWO_D = "2d"
    THREE_D = "3d"
    DEPTH = "depth"


@dataclass
class AttackConfig:
    kind: str = "IDP"
    epsilon: float = 3.0
    step_size: float = 2.0
    steps: int = 3
    momentum: float = 1.0
    random_init: Optional[bool] = None  # None: PGD and IDP start from noise, others from zero
    idp_momentum: bool = False
    seed: int = 0

    def __post_init__(self):
        try:
            self.kind = AttackKind(str(self.kind).upper()).value
        except ValueError:
            raise ValueError(f"unknown attack kind {self.kind!r}") from None
        if self.epsilon < 0:
            raise ValueError("attack.epsilon must be >= 0")
        if self.step_size < 0:
            raise ValueError("attack.step_size must be >= 0")
        if int(self.steps) < 1:
            raise ValueError("attack.steps must be >= 1")
        if self.momentum < 0:
            raise ValueError("attack.momentum must be >= 0")
        self.steps = int(self.steps)

    @property
    def uses_random_init(self) -> bool:
        if self.random_init is not None:
            return bool(self.random_init)
        return self.kind in (AttackKind.PGD.value, AttackKind.IDP.value)

    def replace(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), **changes})


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    return delta.clamp(-epsilon, epsilon)


def sign_step(delta: torch.Tensor, grad: torch.Tensor, beta: float) -> torch.Tensor:
    if delta.shape != grad.shape:
        raise ShapeError(f"gradient shape {tuple(grad.shape)} != perturbation shape {tuple(delta.shape)}")
    return delta + beta * torch.sign(grad)


def idp_loss_selector(iteration: int) -> LossHead:
    """Head attacked at 1-based ``iteration``: 2D, then 3D, then depth, repeating."""
    if iteration < 1:
        raise ValueError("iteration is 1-based")
    r = iteration % 3
    if r == 1:
        return LossHead.TWO_D
    if r == 2:
        return LossHead.THREE_D
    return LossHead.DEPTH


def _frame_outputs(outputs: DetectorOutputs, b: int) -> DetectorOutputs:
    sel = outputs.rois.batch_index == b
    rois = RoiBatch(torch.zeros(int(sel.sum()), dtype=torch.long), outputs.rois.boxes[sel], outputs.rois.cells[sel])
    return DetectorOutputs(
        heatmap=outputs.heatmap[b : b + 1],
        offset2d=outputs.offset2d[b : b + 1],
        size2d=outputs.size2d[b : b + 1],
        rois=rois,
        offset3d=outputs.offset3d[sel],
        size3d=outputs.size3d[sel],
        orient_logits=outputs.orient_logits[sel],
        orient_residuals=outputs.orient_residuals[sel],
        depth_mean=outputs.depth_mean[sel],
        depth_log_sigma=outputs.depth_log_sigma[sel],
    )


def framewise_loss(outputs: DetectorOutputs, targets: TrainTargets, head: str = "total") -> torch.Tensor:
    """Sum over frames of each frame's own loss, so a batched attack equals per-frame attacks."""
    total = 0.0
    for b in range(outputs.heatmap.shape[0]):
        parts = composite_detection_loss(_frame_outputs(outputs, b), targets.select(slice(b, b + 1)))
        total = total + parts.head(head)
    return total


def attack_loss(detector, images, targets: TrainTargets, head: str = "total", preprocess: Callable | None = None):
    x = preprocess(images) if preprocess is not None else images
    return framewise_loss(detector(x, targets.rois()), targets, head)


def _input_grad(detector, adv, targets, head, preprocess, step) -> torch.Tensor:
    x = adv.detach().requires_grad_(True)
    with torch.enable_grad():
        try:
            loss = attack_loss(detector, x, targets, head, preprocess)
        except NumericError as err:
            raise NumericError(f"{err} at attack step {step}", step) from err
        if not bool(torch.isfinite(loss)):
            raise NumericError("non-finite attack loss", step)
        (grad,) = torch.autograd.grad(loss, x)
    if not bool(torch.isfinite(grad).all()):
        raise NumericError("non-finite input gradient", step)
    return grad


def _init_delta(images: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    if not config.uses_random_init or config.epsilon == 0:
        return torch.zeros_like(images)
    gen = torch.Generator().manual_seed(int(config.seed))
    noise = torch.rand(images.shape, generator=gen, dtype=torch.float64).to(images.dtype)
    return (2 * noise - 1) * config.epsilon


def _feasible(images: torch.Tensor, delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    delta = project_linf(delta, epsilon)
    return (images + delta).clamp(0, 255) - images


def _l1_normalize(grad: torch.Tensor) -> torch.Tensor:
    norm = grad.abs().flatten(1).sum(1).clamp(min=1e-12)
    return grad / norm.view(-1, *([1] * (grad.dim() - 1)))


def run_attack(
    detector,
    images: torch.Tensor,
    targets: TrainTargets,
    config: AttackConfig,
    preprocess: Callable | None = None,
    on_step: Callable | None = None,
):
    """Maximise the detection loss inside the epsilon ball; returns ``(adv_images, delta)``."""
    if config.kind == AttackKind.IDP.value:
        return idp_attack(detector, images, targets, config, preprocess, on_step)
    images = images.detach()
    eps = config.epsilon
    if eps == 0:
        return images.clone(), torch.zeros_like(images)

    if config.kind == AttackKind.FGSM.value:
        grad = _input_grad(detector, images, targets, "total", preprocess, 1)
        if on_step:
            on_step(1, "total")
        delta = _feasible(images, sign_step(torch.zeros_like(images), grad, eps), eps)
        return images + delta, delta

    delta = _feasible(images, _init_delta(images, config), eps)
    accum = torch.zeros_like(images)
    for step in range(1, config.steps + 1):
        grad = _input_grad(detector, images + delta, targets, "total", preprocess, step)
        if on_step:
            on_step(step, "total")
        if config.kind == AttackKind.MIFGSM.value:
            accum = config.momentum * accum + _l1_normalize(grad)
            grad = accum
        delta = _feasible(images, sign_step(delta, grad, config.step_size), eps)
    return images + delta, delta


def idp_attack(
    detector,
    images: torch.Tensor,
    targets: TrainTargets,
    config: AttackConfig,
    preprocess: Callable | None = None,
    on_step: Callable | None = None,
):
    """Iterative attack that cycles the maximised loss over the 2D, 3D and depth heads.

    ``on_step(iteration, head)`` is called before each update with the head
    chosen for that iteration.
    """
    if config.kind != AttackKind.IDP.value:
        raise ValueError(f"idp_attack needs kind IDP, got {config.kind}")
    images = images.detach()
    eps = config.epsilon
    delta = _feasible(images, _init_delta(images, config), eps)
    accum = torch.zeros_like(images)
    for step in range(1, config.steps + 1):
        head = idp_loss_selector(step)
        if on_step:
            on_step(step, head)
        grad = _input_grad(detector, images + delta, targets, head.value, preprocess, step)
        if config.idp_momentum:
            accum = config.momentum * accum + _l1_normalize(grad)
            grad = accum
        delta = _feasible(images, sign_step(delta, grad, config.step_size), eps)
    return images + delta, delta


def save_perturbation(path, delta: torch.Tensor) -> Path:
    path = Path(path)
    np.save(path, delta.detach().cpu().numpy())
    return path
