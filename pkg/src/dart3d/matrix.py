"""Attack x defense evaluation matrix.

Every attacked cell regenerates its perturbations against the weights of the
model being evaluated, so no model is ever scored on another model's attacks.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .config import CLEAN, ExperimentConfig
from .defense import GateConfig, gated_inference, make_preprocess
from .detector.targets import build_targets
from .kitti import Frame
from .metrics import DIFFICULTIES, EvalReport, MatchCriteria, evaluate_benchmark
from .attacks import run_attack
from .trainer import TrainResult, stack_images

MATRIX_FIELDS = (
    "model",
    "seed",
    "training_mode",
    "gate_threshold",
    "epoch",
    "defense_mode",
    "attack",
    "task",
    "difficulty",
    "ap_r40",
    "num_gt",
    "num_det",
)


@dataclass
class ModelEntry:
    name: str
    result: TrainResult
    gate_threshold: float = 0.0


def eval_attack_seed(seed: int, batch: int) -> int:
    return 7_000_003 * (seed + 1) + batch


def detect_frames(
    result: TrainResult,
    frames: Sequence[Frame],
    config: ExperimentConfig,
    attack: str = CLEAN,
    inference_mode: str = "never",
    seed: int = 0,
) -> dict:
    """Per-frame detections after an optional white-box attack on each batch."""
    detector, denoiser = result.detector, result.denoiser
    detector.eval()
    ev = config.evaluation
    gate = GateConfig(seed=seed, inference_mode=inference_mode, inference_p=ev.inference_p)
    rng = np.random.default_rng(seed)
    preprocess = make_preprocess(denoiser, ev.attacker_sees_denoiser) if inference_mode != "never" else None
    out = {}
    for start in range(0, len(frames), ev.batch_size):
        chunk = list(frames[start : start + ev.batch_size])
        images = stack_images(chunk).float()
        if attack != CLEAN:
            targets = build_targets(chunk, detector.config, config.training.max_objects)
            attack_cfg = config.attack.to_attack_config(kind=attack, seed=eval_attack_seed(seed, start))
            images, _ = run_attack(detector, images, targets, attack_cfg, preprocess)
        dets = gated_inference(
            detector,
            images,
            [f.calib for f in chunk],
            denoiser,
            gate,
            rng,
            k_max=detector.config.top_k,
            threshold=config.model.score_threshold,
        )
        for f, d in zip(chunk, dets):
            out[f.frame_id] = d
    return out


def evaluate_model(
    result: TrainResult,
    frames: Sequence[Frame],
    config: ExperimentConfig,
    attack: str = CLEAN,
    inference_mode: str = "never",
    seed: int = 0,
) -> EvalReport:
    dets = detect_frames(result, frames, config, attack, inference_mode, seed)
    gts = {f.frame_id: f.labels for f in frames}
    iou = config.evaluation.iou_threshold
    return evaluate_benchmark(dets, gts, (MatchCriteria("3d", iou), MatchCriteria("bev", iou)))


def attack_matrix(models: Sequence[ModelEntry], frames: Sequence[Frame], config: ExperimentConfig) -> list[dict]:
    """Rows ordered by model, defense mode, attack, task and difficulty."""
    rows = []
    for entry in models:
        res = entry.result
        modes = config.evaluation.inference_modes if res.denoiser is not None else ("none",)
        for mode in modes:
            for attack in config.evaluation.attacks:
                report = evaluate_model(res, frames, config, attack, "never" if mode == "none" else mode, res.seed)
                for task in ("3d", "bev"):
                    for diff in DIFFICULTIES:
                        r = report.results[(task, diff)]
                        rows.append(
                            {
                                "model": entry.name,
                                "seed": res.seed,
                                "training_mode": res.mode,
                                "gate_threshold": entry.gate_threshold,
                                "epoch": res.epochs,
                                "defense_mode": mode,
                                "attack": attack,
                                "task": task,
                                "difficulty": diff.label,
                                "ap_r40": r.ap_r40,
                                "num_gt": r.num_gt,
                                "num_det": r.num_det,
                            }
                        )
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MATRIX_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["ap_r40"] = f"{float(row['ap_r40']):.6f}"
        out["gate_threshold"] = f"{float(row['gate_threshold']):.2f}"
        writer.writerow(out)
    return buf.getvalue()
