"""Training loops for the standard, adversarial and gated (dart3d) regimes."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .attacks import run_attack
from .config import ExperimentConfig
from .defense import Denoiser, GateConfig, GateSampler, gated_train_step, weighted_detection_loss
from .detector.losses import composite_detection_loss
from .detector.model import DetectorConfig, MonoDetector, RoiBatch
from .detector.targets import TrainTargets, build_targets
from .errors import NumericError
from .kitti import Frame, flip_frame
from .synth import SceneConfig, read_dataset, synth_dataset

log = logging.getLogger(__name__)

_FRAME_CACHE: dict = {}

EPOCH_FIELDS = ("epoch", "lr", "steps", "loss_r", "loss_2d", "loss_3d", "loss_depth", "loss_total", "denoised_fraction")


class CheckpointMismatch(RuntimeError):
    pass


def scene_config(config: ExperimentConfig) -> SceneConfig:
    ds = config.dataset
    return SceneConfig(
        width=ds.width,
        height=ds.height,
        focal=ds.focal,
        min_objects=ds.min_objects,
        max_objects=ds.max_objects,
        depth_range=ds.depth_range,
        aligned_fraction=ds.aligned_fraction,
    )


def load_frames(config: ExperimentConfig, split: str) -> list[Frame]:
    """Training or validation frames; synthetic sets are cached per process."""
    ds = config.dataset
    if split not in ("train", "val"):
        raise ValueError(f"unknown split {split!r}")
    if ds.source == "directory":
        return read_dataset(ds.path if split == "train" else (ds.val_path or ds.path))
    key = (json.dumps(config.to_dict()["dataset"], sort_keys=True), split)
    if key not in _FRAME_CACHE:
        if split == "train":
            seeds = range(ds.train_seed_offset, ds.train_seed_offset + ds.train_frames)
        else:
            seeds = range(ds.val_seed_offset, ds.val_seed_offset + ds.val_frames)
        _FRAME_CACHE[key] = synth_dataset(scene_config(config), seeds)
    return _FRAME_CACHE[key]


def pixel_stats(frames) -> tuple[tuple, tuple]:
    """Per-channel mean and std of the training images, used to normalise inputs."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for f in frames:
        px = f.image.reshape(-1, 3).astype(np.float64)
        total += px.sum(0)
        total_sq += (px**2).sum(0)
        count += px.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-6))
    return tuple(float(round(v, 4)) for v in mean), tuple(float(round(v, 4)) for v in std)


def detector_config(config: ExperimentConfig, mean, std) -> DetectorConfig:
    m = config.model
    return DetectorConfig(
        channels=m.channels,
        head_channels=m.head_channels,
        roi_size=m.roi_size,
        roi_hidden=m.roi_hidden,
        top_k=m.top_k,
        pixel_mean=mean,
        pixel_std=std,
    )


def stack_images(frames) -> torch.Tensor:
    """uint8 (N,3,H,W) tensor; batches are cast to float on demand."""
    return torch.from_numpy(np.stack([f.image for f in frames])).permute(0, 3, 1, 2).contiguous()


def learning_rate(step: int, steps_per_epoch: int, epochs: int, base_lr: float, warmup_epochs: float, decay_at) -> float:
    """Linear warm-up followed by x0.1 steps at the given fractions of training."""
    warm = warmup_epochs * steps_per_epoch
    lr = base_lr * min(1.0, (step + 1) / warm) if warm > 0 else base_lr
    epoch = step // steps_per_epoch
    for frac in decay_at:
        if epoch >= int(epochs * frac):
            lr *= 0.1
    return lr


def attack_seed(seed: int, step: int) -> int:
    return seed * 1_000_003 + step


def jitter_rois(rois: RoiBatch, sigma: float, generator: torch.Generator) -> RoiBatch:
    """Randomly shift and rescale boxes so the 3D head sees imperfect regions in training."""
    if sigma <= 0 or len(rois) == 0:
        return rois
    boxes = rois.boxes
    noise = torch.randn((boxes.shape[0], 4), generator=generator, dtype=torch.float64).to(boxes.dtype) * sigma
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = (boxes[:, 0] + boxes[:, 2]) / 2 + noise[:, 0] * w
    cy = (boxes[:, 1] + boxes[:, 3]) / 2 + noise[:, 1] * h
    w = (w * noise[:, 2].exp()).clamp(min=0.5)
    h = (h * noise[:, 3].exp()).clamp(min=0.5)
    jittered = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)
    return RoiBatch(rois.batch_index, jittered, rois.cells)


def flip_mix(images: torch.Tensor, targets: TrainTargets, flipped: TrainTargets, flips: torch.Tensor):
    """Mirror the images selected by ``flips`` and swap in their mirrored targets."""
    if not bool(flips.any()):
        return images, targets
    view = flips.view(-1, 1, 1, 1)
    images = torch.where(view, images.flip(-1), images)
    mixed = {}
    for k, v in targets.__dict__.items():
        mask = flips.view(-1, *([1] * (v.dim() - 1)))
        mixed[k] = torch.where(mask, getattr(flipped, k), v)
    return images, TrainTargets(**mixed)


def adversarial_step(detector, optimizer, images, targets, attack, weight_3d: float = 1.0, rois=None) -> dict:
    """Craft a perturbation against the current detector and train on it."""
    _, delta = run_attack(detector, images, targets, attack)
    optimizer.zero_grad(set_to_none=True)
    rois = targets.rois() if rois is None else rois
    parts = composite_detection_loss(detector(images + delta, rois), targets)
    loss = weighted_detection_loss(parts, weight_3d)
    if not bool(torch.isfinite(loss)):
        raise NumericError("non-finite training loss")
    loss.backward()
    optimizer.step()
    return {"loss_r": 0.0, **parts.as_floats(), "loss_total": float(loss.detach())}


def clean_step(detector, optimizer, images, targets, weight_3d: float = 1.0, rois=None) -> dict:
    optimizer.zero_grad(set_to_none=True)
    rois = targets.rois() if rois is None else rois
    parts = composite_detection_loss(detector(images, rois), targets)
    loss = weighted_detection_loss(parts, weight_3d)
    if not bool(torch.isfinite(loss)):
        raise NumericError("non-finite training loss")
    loss.backward()
    optimizer.step()
    return {"loss_r": 0.0, **parts.as_floats(), "loss_total": float(loss.detach())}


@dataclass
class TrainResult:
    detector: MonoDetector
    denoiser: Optional[Denoiser]
    mode: str
    seed: int
    epochs: int
    epoch_log: list = field(default_factory=list)
    step_log: list = field(default_factory=list)


def save_checkpoint(path, result: TrainResult, config: ExperimentConfig, epoch: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "fingerprint": config.training_fingerprint(),
        "version": __version__,
        "mode": result.mode,
        "seed": result.seed,
        "epoch": result.epochs if epoch is None else epoch,
        "detector_config": result.detector.config.to_dict(),
        "detector": {k: v.detach().clone() for k, v in result.detector.state_dict().items()},
        "denoiser": None
        if result.denoiser is None
        else {k: v.detach().clone() for k, v in result.denoiser.state_dict().items()},
        "denoiser_channels": config.model.denoiser_channels,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, config: ExperimentConfig | None = None) -> TrainResult:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if config is not None and payload["fingerprint"] != config.training_fingerprint():
        raise CheckpointMismatch(
            f"checkpoint {path} was trained under config {payload['fingerprint']}, "
            f"current config is {config.training_fingerprint()}"
        )
    detector = MonoDetector(DetectorConfig(**payload["detector_config"]))
    detector.load_state_dict(payload["detector"])
    denoiser = None
    if payload["denoiser"] is not None:
        denoiser = Denoiser(payload["denoiser_channels"])
        denoiser.load_state_dict(payload["denoiser"])
    return TrainResult(detector, denoiser, payload["mode"], payload["seed"], payload["epoch"])


def train_model(
    config: ExperimentConfig,
    mode: str,
    seed: int,
    init: TrainResult | None = None,
    out_dir=None,
    frames: list[Frame] | None = None,
) -> TrainResult:
    """Train one model.

    ``standard`` trains from scratch on clean frames. ``adversarial`` and
    ``dart3d`` fine-tune ``init`` (a standard model of the same seed) on
    perturbed frames for ``training.finetune_epochs``; when ``init`` is None they
    train from scratch with the full schedule instead.
    """
    if mode not in ("standard", "adversarial", "dart3d"):
        raise ValueError(f"unknown training mode {mode!r}")
    tr = config.training
    frames = load_frames(config, "train") if frames is None else frames
    torch.manual_seed(seed)
    if init is not None:
        detector = MonoDetector(init.detector.config)
        detector.load_state_dict(init.detector.state_dict())
        epochs, base_lr, ramp = tr.finetune_epochs, tr.finetune_lr, 0.0
    else:
        mean, std = pixel_stats(frames)
        detector = MonoDetector(detector_config(config, mean, std))
        epochs, base_lr, ramp = tr.epochs, tr.lr, tr.ramp_fraction
    denoiser = Denoiser(config.model.denoiser_channels) if mode == "dart3d" else None
    params = list(detector.parameters()) + (list(denoiser.parameters()) if denoiser is not None else [])
    optimizer = torch.optim.Adam(params, lr=base_lr)

    images = stack_images(frames)
    targets = build_targets(frames, detector.config, tr.max_objects)
    flipped = build_targets([flip_frame(f) for f in frames], detector.config, tr.max_objects) if tr.flip_augment else None
    n = len(frames)
    bsz = min(tr.batch_size, n)
    per_epoch = max(1, n // bsz)
    order_gen = torch.Generator().manual_seed(seed)
    aug_gen = torch.Generator().manual_seed(seed + 1)
    gate = GateConfig(threshold=tr.gate_threshold, seed=seed)
    sampler = GateSampler(seed)
    result = TrainResult(detector, denoiser, mode, seed, epochs)
    out_dir = Path(out_dir) if out_dir is not None else None
    streak = 0
    step = 0
    detector.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=order_gen)
        sums: dict = {}
        done = denoised = 0
        for b in range(per_epoch):
            idx = perm[b * bsz : (b + 1) * bsz]
            lr = learning_rate(step, per_epoch, epochs, base_lr, tr.warmup_epochs if init is None else 0.0, tr.decay_at)
            for g in optimizer.param_groups:
                g["lr"] = lr
            weight_3d = min(1.0, (epoch + b / per_epoch) / (ramp * epochs)) if ramp > 0 else 1.0
            x = images[idx].float()
            t: TrainTargets = targets.select(idx)
            if flipped is not None:
                x, t = flip_mix(x, t, flipped.select(idx), torch.rand(len(idx), generator=aug_gen) < 0.5)
            rois = jitter_rois(t.rois(), tr.roi_jitter, aug_gen)
            attack = config.attack.to_attack_config(seed=attack_seed(seed, step))
            try:
                if mode == "standard":
                    losses = clean_step(detector, optimizer, x, t, weight_3d, rois)
                elif mode == "adversarial":
                    losses = adversarial_step(detector, optimizer, x, t, attack, weight_3d, rois)
                else:
                    record = gated_train_step(
                        detector, denoiser, optimizer, x, t, attack, gate, sampler.draw(), weight_3d, rois
                    )
                    result.step_log.append({"step": step, **record.as_row()})
                    losses = record.losses
                    denoised += record.path == "denoised"
                streak = 0
            except NumericError as err:
                streak += 1
                log.warning("step %d skipped: %s", step, err)
                if streak >= tr.nonfinite_patience:
                    raise NumericError(f"{streak} consecutive non-finite steps, aborting", step) from err
                step += 1
                continue
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            done += 1
            step += 1
        row = {"epoch": epoch + 1, "lr": lr, "steps": done}
        for k in EPOCH_FIELDS[3:-1]:
            row[k] = sums.get(k, 0.0) / max(done, 1)
        row["denoised_fraction"] = denoised / max(done, 1)
        result.epoch_log.append(row)
        log.info("%s seed %d epoch %d: total %.4f", mode, seed, epoch + 1, row["loss_total"])
        if out_dir is not None and tr.checkpoint_every and (epoch + 1) % tr.checkpoint_every == 0 and epoch + 1 < epochs:
            save_checkpoint(out_dir / f"{mode}_seed{seed}_ep{epoch + 1}.pt", result, config, epoch + 1)
    detector.eval()
    if out_dir is not None:
        write_run_outputs(out_dir, result, config)
    return result


def write_run_outputs(out_dir, result: TrainResult, config: ExperimentConfig) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{result.mode}_seed{result.seed}"
    ckpt = save_checkpoint(out_dir / f"{stem}.pt", result, config)
    with open(out_dir / f"{stem}_epochs.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EPOCH_FIELDS)
        writer.writeheader()
        for row in result.epoch_log:
            writer.writerow({k: _fmt(row[k]) for k in EPOCH_FIELDS})
    if result.step_log:
        keys = list(result.step_log[0])
        with open(out_dir / f"{stem}_steps.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for row in result.step_log:
                writer.writerow({k: _fmt(row[k]) for k in keys})
    return ckpt


def _fmt(value):
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return value


def write_manifest(out_dir, config: ExperimentConfig, outputs: dict, pixel_mean=None) -> Path:
    """Run manifest: config fingerprint, code version, seeds and per-seed output paths."""
    out_dir = Path(out_dir)
    manifest = {
        "fingerprint": config.fingerprint(),
        "training_fingerprint": config.training_fingerprint(),
        "version": __version__,
        "seeds": list(config.seeds),
        "outputs": {str(k): v for k, v in outputs.items()},
        "pixel_mean": list(pixel_mean) if pixel_mean is not None else None,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
