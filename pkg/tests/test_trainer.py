import numpy as np
import pytest
import torch

from dart3d.config import config_from_dict
from dart3d.detector import build_targets
from dart3d.kitti import flip_frame
from dart3d.trainer import (
    CheckpointMismatch,
    EPOCH_FIELDS,
    flip_mix,
    jitter_rois,
    learning_rate,
    load_checkpoint,
    load_frames,
    save_checkpoint,
    stack_images,
    train_model,
    write_manifest,
    write_run_outputs,
)

from conftest import toy_experiment


def _state(result):
    out = dict(result.detector.state_dict())
    if result.denoiser is not None:
        out.update({f"den.{k}": v for k, v in result.denoiser.state_dict().items()})
    return out


def _same_state(a, b):
    sa, sb = _state(a), _state(b)
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_learning_rate_schedule():
    lrs = [learning_rate(s, 10, 10, 1.0, 2.0, (0.5, 0.8)) for s in range(100)]
    assert lrs[0] == pytest.approx(0.05) and lrs[19] == 1.0
    assert lrs[49] == 1.0 and lrs[50] == pytest.approx(0.1) and lrs[80] == pytest.approx(0.01)
    assert all(b >= a for a, b in zip(lrs[:20], lrs[1:20]))
    assert learning_rate(0, 10, 10, 0.5, 0.0, ()) == 0.5


def test_flip_mix_swaps_selected_frames(small_frames):
    from conftest import tiny_detector_config

    cfg = tiny_detector_config()
    x = stack_images(small_frames).float()
    t = build_targets(small_frames, cfg)
    tf = build_targets([flip_frame(f) for f in small_frames], cfg)
    flips = torch.tensor([True, False, True, False])
    xm, tm = flip_mix(x, t, tf, flips)
    assert torch.equal(xm[0], x[0].flip(-1)) and torch.equal(xm[1], x[1])
    assert torch.equal(tm.heatmap[2], tf.heatmap[2]) and torch.equal(tm.depth[3], t.depth[3])
    same_x, same_t = flip_mix(x, t, tf, torch.zeros(4, dtype=torch.bool))
    assert same_x is x and same_t is t


def test_jitter_rois_keeps_cells_and_is_seeded(small_frames):
    from conftest import tiny_detector_config

    rois = build_targets(small_frames, tiny_detector_config()).rois()
    a = jitter_rois(rois, 0.06, torch.Generator().manual_seed(0))
    b = jitter_rois(rois, 0.06, torch.Generator().manual_seed(0))
    assert torch.equal(a.boxes, b.boxes) and torch.equal(a.cells, rois.cells)
    assert not torch.equal(a.boxes, rois.boxes)
    assert bool(((a.boxes[:, 2:] - a.boxes[:, :2]) > 0).all())
    assert jitter_rois(rois, 0.0, torch.Generator()) is rois


def test_same_seed_runs_give_identical_checkpoints(tmp_path):
    config = toy_experiment(epochs=3, finetune_epochs=1)
    frames = load_frames(config, "train")
    a = train_model(config, "standard", 1, frames=frames, out_dir=tmp_path / "a")
    b = train_model(config, "standard", 1, frames=frames, out_dir=tmp_path / "b")
    assert _same_state(a, b)
    assert (tmp_path / "a/standard_seed1_epochs.csv").read_bytes() == (tmp_path / "b/standard_seed1_epochs.csv").read_bytes()
    da = train_model(config, "dart3d", 1, init=a, frames=frames)
    db = train_model(config, "dart3d", 1, init=b, frames=frames)
    assert _same_state(da, db) and da.step_log == db.step_log
    c = train_model(config, "standard", 2, frames=frames)
    assert not _same_state(a, c)


def test_threshold_zero_dart3d_matches_adversarial():
    config = toy_experiment(epochs=2, finetune_epochs=2, gate_threshold=0.0)
    frames = load_frames(config, "train")
    base = train_model(config, "standard", 0, frames=frames)
    adv = train_model(config, "adversarial", 0, init=base, frames=frames)
    dart = train_model(config, "dart3d", 0, init=base, frames=frames)
    assert adv.epoch_log == dart.epoch_log
    assert all(torch.equal(p, q) for p, q in zip(adv.detector.parameters(), dart.detector.parameters()))
    assert all(r["path"] == "plain" for r in dart.step_log)


def test_overfits_single_frame():
    config = toy_experiment(
        epochs=200, batch_size=1, lr=0.005, warmup_epochs=0.0, decay_at=[], ramp_fraction=0.0,
        flip_augment=False, roi_jitter=0.0,
    )
    frames = load_frames(config, "train")[:1]
    result = train_model(config, "standard", 0, frames=frames)
    first, last = result.epoch_log[0]["loss_total"], result.epoch_log[-1]["loss_total"]
    # Laplace depth loss can go negative; measure the drop of the non-negative parts
    def pos(row):
        return row["loss_2d"] + row["loss_3d"]
    assert pos(result.epoch_log[-1]) <= 0.1 * pos(result.epoch_log[0]), (first, last)
    assert last <= first - 0.9 * abs(first)


def test_checkpoint_roundtrip_and_mismatch(tmp_path, toy_model):
    config, result = toy_model
    path = save_checkpoint(tmp_path / "m.pt", result, config)
    again = load_checkpoint(path, config)
    assert _same_state(result, again) and again.mode == "standard"
    assert load_checkpoint(path, config_from_dict({**config.to_dict(), "evaluation": {"batch_size": 3}})).seed == 0
    other = config_from_dict({**config.to_dict(), "attack": {"epsilon": 2.0}})
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, other)


def test_run_outputs_and_manifest(tmp_path, toy_model):
    import csv
    import json

    config, result = toy_model
    write_run_outputs(tmp_path, result, config)
    rows = list(csv.DictReader(open(tmp_path / "standard_seed0_epochs.csv")))
    assert len(rows) == result.epochs and tuple(rows[0]) == EPOCH_FIELDS
    manifest = json.loads(write_manifest(tmp_path, config, {0: {"standard": "x.pt"}}, (1.0, 2.0, 3.0)).read_text())
    assert manifest["fingerprint"] == config.fingerprint() and manifest["seeds"] == [0]


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        train_model(toy_experiment(), "trades", 0)


def test_standard_training_reduces_loss(toy_model):
    _, result = toy_model
    log = result.epoch_log
    assert log[-1]["loss_2d"] < 0.6 * log[0]["loss_2d"]
    assert np.isfinite([r["loss_total"] for r in log]).all()
