"""Experiment configuration: a sectioned YAML document with strict keys and range checks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackConfig, AttackKind
from .defense import InferenceMode

CLEAN = "Clean"
MATRIX_ATTACKS = (CLEAN, "FGSM", "BIM", "PGD", "MIFGSM", "IDP")
TRAINING_MODES = ("standard", "adversarial", "dart3d")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    source: str = "synthetic"  # or "directory"
    path: str = ""
    val_path: str = ""
    train_frames: int = 2000
    val_frames: int = 200
    train_seed_offset: int = 0
    val_seed_offset: int = 1_000_000
    width: int = 384
    height: int = 128
    focal: float = 250.0
    min_objects: int = 1
    max_objects: int = 4
    depth_range: tuple = (6.0, 24.0)
    aligned_fraction: float = 0.75

    def validate(self):
        if self.source not in ("synthetic", "directory"):
            raise ConfigError("dataset.source must be 'synthetic' or 'directory'")
        if self.source == "directory" and not self.path:
            raise ConfigError("dataset.path is required when dataset.source is 'directory'")
        for name in ("train_frames", "val_frames", "width", "height", "min_objects", "max_objects"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1")
        if self.width % 4 or self.height % 4:
            raise ConfigError("dataset.width and dataset.height must be multiples of 4")
        if self.focal <= 0:
            raise ConfigError("dataset.focal must be > 0")
        if not 0 <= self.aligned_fraction <= 1:
            raise ConfigError("dataset.aligned_fraction must lie in [0, 1]")
        if len(self.depth_range) != 2 or not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ConfigError("dataset.depth_range must be [near, far] with 0 < near < far")


@dataclass
class ModelSection:
    channels: tuple = (16, 32, 64)
    head_channels: int = 32
    roi_size: int = 7
    roi_hidden: int = 128
    top_k: int = 20
    denoiser_channels: int = 16
    score_threshold: float = 0.1

    def validate(self):
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError("model.channels must be three positive integers")
        for name in ("head_channels", "roi_size", "roi_hidden", "top_k", "denoiser_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not 0 <= self.score_threshold < 1:
            raise ConfigError("model.score_threshold must lie in [0, 1)")


@dataclass
class TrainingSection:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    warmup_epochs: float = 2.0
    decay_at: tuple = (0.7, 0.9)
    ramp_fraction: float = 0.2
    finetune_epochs: int = 4
    finetune_lr: float = 5e-4
    gate_threshold: float = 0.5
    flip_augment: bool = True
    roi_jitter: float = 0.06
    max_objects: int = 8
    checkpoint_every: int = 0
    nonfinite_patience: int = 3

    def validate(self):
        for name in ("epochs", "batch_size", "max_objects", "nonfinite_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be >= 1")
        for name in ("finetune_epochs", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"training.{name} must be >= 0")
        for name in ("lr", "finetune_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"training.{name} must be > 0")
        if self.warmup_epochs < 0:
            raise ConfigError("training.warmup_epochs must be >= 0")
        if not all(0 <= d <= 1 for d in self.decay_at):
            raise ConfigError("training.decay_at entries must lie in [0, 1]")
        if not 0 <= self.ramp_fraction <= 1:
            raise ConfigError("training.ramp_fraction must lie in [0, 1]")
        if not 0 <= self.gate_threshold <= 1:
            raise ConfigError("training.gate_threshold must lie in [0, 1]")
        if not 0 <= self.roi_jitter < 1:
            raise ConfigError("training.roi_jitter must lie in [0, 1)")


@dataclass
class AttackSection:
    kind: str = "IDP"
    epsilon: float = 3.0
    step_size: float = 2.0
    steps: int = 3
    momentum: float = 1.0
    random_init: Any = None
    idp_momentum: bool = False

    def validate(self):
        self.to_attack_config()

    def to_attack_config(self, kind: str | None = None, seed: int = 0) -> AttackConfig:
        params = {k: v for k, v in asdict(self).items()}
        if kind is not None:
            params["kind"] = kind
        try:
            return AttackConfig(seed=seed, **params)
        except ValueError as err:
            msg = str(err)
            raise ConfigError(msg if msg.startswith("attack.") else f"attack.kind: {msg}") from None


@dataclass
class EvaluationSection:
    attacks: tuple = MATRIX_ATTACKS
    inference_modes: tuple = ("always",)
    inference_p: float = 0.5
    attacker_sees_denoiser: bool = True
    iou_threshold: float = 0.7
    batch_size: int = 20

    def validate(self):
        for a in self.attacks:
            if a != CLEAN and a.upper() not in AttackKind.__members__:
                raise ConfigError(f"evaluation.attacks: unknown attack {a!r}")
        for m in self.inference_modes:
            if m not in {x.value for x in InferenceMode}:
                raise ConfigError(f"evaluation.inference_modes: unknown mode {m!r}")
        if not 0 <= self.inference_p <= 1:
            raise ConfigError("evaluation.inference_p must lie in [0, 1]")
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError("evaluation.iou_threshold must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("evaluation.batch_size must be >= 1")


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "training": TrainingSection,
    "attack": AttackSection,
    "evaluation": EvaluationSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seeds: tuple = (0, 1, 2)

    def validate(self) -> "ExperimentConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        return self

    def to_dict(self) -> dict:
        out = {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}
        out["seeds"] = list(self.seeds)
        return out

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def training_fingerprint(self) -> str:
        """Hash of the sections that determine trained weights (evaluation settings excluded)."""
        doc = {k: v for k, v in self.to_dict().items() if k in ("dataset", "model", "training", "attack")}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        kind = type(default[0]) if default else None
        if kind is float:
            return tuple(_coerce(section, key, v, 0.0) for v in value)
        if kind is int:
            return tuple(_coerce(section, key, v, 0) for v in value)
        return tuple(value)
    return value


def config_from_dict(doc: dict | None) -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - {"seeds"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        body = doc.get(name) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        defaults = cls()
        known = {f.name for f in fields(cls)}
        bad = sorted(set(body) - known)
        if bad:
            raise ConfigError(f"unknown keys in {name}: {', '.join(f'{name}.{k}' for k in bad)}")
        values = {k: _coerce(name, k, v, getattr(defaults, k)) for k, v in body.items()}
        built[name] = cls(**values)
    seeds = doc.get("seeds", [0, 1, 2])
    if not isinstance(seeds, (list, tuple)) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    return ExperimentConfig(**built, seeds=tuple(seeds)).validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    doc = yaml.safe_load(text)
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    return config_from_dict(doc)


def dump_config(config: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(config.to_dict(), sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    doc = config.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if dotted == "seeds":
            doc["seeds"] = value if isinstance(value, list) else [value]
            continue
        if "." not in dotted:
            raise ConfigError(f"override {item!r} needs a section.key name")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown top-level keys: {section}")
        doc[section][key] = value
    return config_from_dict(doc)
