"""Command line entry point: ``dart3d {train,attack-matrix,report,synth-data}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import TRAINING_MODES, ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config
from .matrix import ModelEntry, attack_matrix, rows_to_csv
from .report import ReportError, emit_report
from .synth import write_dataset
from .trainer import (
    CheckpointMismatch,
    load_checkpoint,
    load_frames,
    pixel_stats,
    train_model,
    write_manifest,
)

log = logging.getLogger("dart3d")


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig().validate()
    return apply_overrides(config, args.set)


def cmd_train(config: ExperimentConfig, modes, out_dir) -> Path:
    """Train every requested mode for every seed; adversarial modes fine-tune the standard model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config.yaml")
    frames = load_frames(config, "train")
    outputs = {}
    for seed in config.seeds:
        per_seed = {}
        ckpt = out_dir / f"standard_seed{seed}.pt"
        if "standard" not in modes and ckpt.exists():
            base = load_checkpoint(ckpt, config)
        else:
            base = train_model(config, "standard", seed, frames=frames, out_dir=out_dir)
            per_seed["standard"] = str(ckpt)
        for mode in modes:
            if mode == "standard":
                continue
            result = train_model(config, mode, seed, init=base, frames=frames, out_dir=out_dir)
            per_seed[mode] = str(out_dir / f"{result.mode}_seed{seed}.pt")
        outputs[seed] = per_seed
    return write_manifest(out_dir, config, outputs, pixel_stats(frames)[0])


def cmd_attack_matrix(config: ExperimentConfig, checkpoints, out_path) -> Path:
    frames = load_frames(config, "val")
    entries = []
    for path in checkpoints:
        result = load_checkpoint(path, config)
        threshold = config.training.gate_threshold if result.mode == "dart3d" else 0.0
        entries.append(ModelEntry(Path(path).stem, result, threshold))
    text = rows_to_csv(attack_matrix(entries, frames, config))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(text)
    return out_path


def cmd_synth_data(config: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    cfg_dict = config.to_dict()["dataset"]
    for split in ("train", "val"):
        write_dataset(out_dir / split, load_frames(config, split), {"dataset": cfg_dict, "split": split})
    return out_dir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dart3d", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")

    p = sub.add_parser("train", help="train models for every configured seed")
    common(p)
    p.add_argument("--mode", action="append", choices=TRAINING_MODES, help="repeatable; default all three")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("attack-matrix", help="evaluate checkpoints under every configured attack")
    common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("report", help="turn a matrix CSV into plot-ready tables")
    p.add_argument("matrix_csv")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth-data", help="write the synthetic train/val splits as KITTI-style folders")
    common(p)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            path = cmd_train(_config(args), args.mode or list(TRAINING_MODES), args.out)
        elif args.command == "attack-matrix":
            path = cmd_attack_matrix(_config(args), args.checkpoints, args.out)
        elif args.command == "report":
            emit_report(Path(args.matrix_csv).read_text(), args.out)
            path = Path(args.out)
        else:
            path = cmd_synth_data(_config(args), args.out)
    except (ConfigError, CheckpointMismatch, ReportError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
