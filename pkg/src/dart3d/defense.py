"""Residual denoiser, inverse pseudo-labels and uncertainty-gated adversarial training."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .attacks import AttackConfig, run_attack
from .detector.decode import decode_detections
from .detector.losses import LossBreakdown, composite_detection_loss
from .detector.model import RoiBatch
from .detector.targets import TrainTargets
from .errors import NumericError, ShapeError


class Denoiser(nn.Module):
    """Six-layer residual network that predicts the perturbation and subtracts it.

    Inputs are centred and scaled before the convolutions, and the predicted
    noise is scaled back to pixel units by ``noise_scale`` (a few pixel levels),
    so small weight updates move the output by amounts comparable to the attack
    budget. The last layer starts at zero so the module is the identity before
    training.
    """

    def __init__(self, channels: int = 16, input_scale: float = 64.0, noise_scale: float = 8.0):
        super().__init__()
        self.input_scale = float(input_scale)
        self.noise_scale = float(noise_scale)
        self.body = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            *[m for _ in range(4) for m in (nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True))],
        )
        self.tail = nn.Conv2d(channels, 3, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def predict_noise(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) images, got {tuple(images.shape)}")
        x = (images - 128.0) / self.input_scale
        return self.tail(self.body(x)) * self.noise_scale

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return images - self.predict_noise(images)


def denoise(adv_images: torch.Tensor, denoiser: Denoiser) -> torch.Tensor:
    return denoiser(adv_images)


def inverse_label(images: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """``x - delta``; deliberately left unclipped since it is a regression target."""
    if images.shape != delta.shape:
        raise ShapeError(f"image shape {tuple(images.shape)} != perturbation shape {tuple(delta.shape)}")
    return images - delta


def residual_loss(denoised: torch.Tensor, pseudo_label: torch.Tensor) -> torch.Tensor:
    """Per-image RMS of the difference, averaged over the batch."""
    if denoised.shape != pseudo_label.shape:
        raise ShapeError(f"shape mismatch {tuple(denoised.shape)} vs {tuple(pseudo_label.shape)}")
    diff = (denoised - pseudo_label).flatten(1)
    return diff.pow(2).mean(1).sqrt().mean()


class InferenceMode(str, enum.Enum):
    ALWAYS = "always"
    NEVER = "never"
    RANDOM = "random"


@dataclass
class GateConfig:
    threshold: float = 0.5
    seed: int = 0
    inference_mode: str = "always"
    inference_p: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("gate.threshold must lie in [0, 1]")
        if not 0.0 <= self.inference_p <= 1.0:
            raise ValueError("gate.inference_p must lie in [0, 1]")
        try:
            self.inference_mode = InferenceMode(str(self.inference_mode).lower()).value
        except ValueError:
            raise ValueError(f"unknown inference mode {self.inference_mode!r}") from None


class GateSampler:
    """Single seeded stream of uniform draws owned by the training loop."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def draw(self) -> float:
        return float(self._rng.random())


def select_path(gate_draw: float, gate: GateConfig) -> str:
    """Training path for one step: the denoiser branch exactly when the draw is below the threshold."""
    return "denoised" if gate_draw < gate.threshold else "plain"


@dataclass
class TrainStepRecord:
    gate_draw: float
    path: str  # "denoised" or "plain"
    losses: dict = field(default_factory=dict)
    grad_norm: float = float("nan")

    def as_row(self) -> dict:
        return {"gate_draw": self.gate_draw, "path": self.path, **self.losses, "grad_norm": self.grad_norm}


def weighted_detection_loss(parts: LossBreakdown, weight_3d: float = 1.0) -> torch.Tensor:
    """2D loss plus ``weight_3d`` times the 3D and depth losses."""
    if weight_3d == 1.0:
        return parts.total
    return parts.loss_2d + weight_3d * (parts.loss_3d + parts.loss_depth)


def _grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(sq)


def gated_train_step(
    detector: nn.Module,
    denoiser: Denoiser,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    targets: TrainTargets,
    attack: AttackConfig,
    gate: GateConfig,
    gate_draw: float,
    weight_3d: float = 1.0,
    rois: RoiBatch | None = None,
) -> TrainStepRecord:
    """One adversarial training update with the stochastic denoiser branch.

    ``optimizer`` must hold both the detector and the denoiser parameters. The
    perturbation is crafted against the detector as it currently stands. When
    ``gate_draw < gate.threshold`` the residual loss plus the detection loss on
    the denoised image is minimised through both networks; otherwise only the
    detector is trained on the adversarial image and the denoiser is left untouched.
    ``rois`` overrides the ground-truth regions fed to the 3D head (for jitter).
    """
    _, delta = run_attack(detector, images, targets, attack)
    adv = images + delta
    rois = targets.rois() if rois is None else rois
    optimizer.zero_grad(set_to_none=True)

    record = TrainStepRecord(gate_draw, select_path(gate_draw, gate))
    try:
        if record.path == "denoised":
            denoised = denoiser(adv)
            l_r = residual_loss(denoised, inverse_label(images, delta))
            parts = composite_detection_loss(detector(denoised, rois), targets)
            loss = l_r + weighted_detection_loss(parts, weight_3d)
        else:
            l_r = torch.zeros(())
            parts = composite_detection_loss(detector(adv, rois), targets)
            loss = weighted_detection_loss(parts, weight_3d)
        record.losses = {"loss_r": float(l_r.detach()), **parts.as_floats(), "loss_total": float(loss.detach())}
        if not bool(torch.isfinite(loss)):
            raise NumericError("non-finite training loss")
    except NumericError as err:
        err.record = record
        raise
    loss.backward()
    if record.path == "plain":
        for p in denoiser.parameters():
            p.grad = None
    record.grad_norm = _grad_norm(list(detector.parameters()) + list(denoiser.parameters()))
    optimizer.step()
    return record


def gated_inference(
    detector: nn.Module,
    images: torch.Tensor,
    calibs,
    denoiser: Optional[Denoiser],
    gate: GateConfig,
    rng: Optional[np.random.Generator] = None,
    k_max: int = 20,
    threshold: float = 0.1,
) -> list:
    """Detect on a batch, routing each frame through the denoiser per ``gate.inference_mode``.

    Returns one detection list per frame. Random mode draws one uniform per frame
    from ``rng`` (seeded from ``gate.seed`` when omitted).
    """
    if gate.inference_mode == InferenceMode.RANDOM.value and rng is None:
        rng = np.random.default_rng(gate.seed)
    use = []
    for _ in range(images.shape[0]):
        if denoiser is None or gate.inference_mode == InferenceMode.NEVER.value:
            use.append(False)
        elif gate.inference_mode == InferenceMode.ALWAYS.value:
            use.append(True)
        else:
            use.append(bool(rng.random() < gate.inference_p))
    with torch.no_grad():
        x = images
        if any(use):
            mask = torch.tensor(use).view(-1, 1, 1, 1)
            x = torch.where(mask, denoiser(images), images)
        outputs = detector(x)
    mean_dims = detector.config.mean_dims
    size = tuple(images.shape[-2:])
    return [
        decode_detections(outputs, calibs[b], k_max, threshold, mean_dims, b, size)
        for b in range(images.shape[0])
    ]


def make_preprocess(denoiser: Optional[Denoiser], attacker_sees_denoiser: bool) -> Optional[Callable]:
    """Gradient path for an attacker: through the denoiser only if it knows about it."""
    return denoiser if (denoiser is not None and attacker_sees_denoiser) else None
