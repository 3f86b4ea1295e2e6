import numpy as np
import pytest
import torch

from dart3d.detector import DetectorConfig, MonoDetector
from dart3d.synth import SceneConfig, synth_scene


def tiny_detector_config(**overrides) -> DetectorConfig:
    params = dict(channels=(4, 6, 8), head_channels=6, roi_size=3, roi_hidden=8, top_k=4)
    params.update(overrides)
    return DetectorConfig(**params)


def tiny_detector(seed: int = 0, dtype=torch.float64, **overrides) -> MonoDetector:
    torch.manual_seed(seed)
    return MonoDetector(tiny_detector_config(**overrides)).to(dtype)


@pytest.fixture
def small_scene_config():
    return SceneConfig(width=64, height=32, focal=60.0, max_objects=3, depth_range=(5.0, 12.0))


@pytest.fixture
def small_frames(small_scene_config):
    return [synth_scene(small_scene_config, s) for s in range(4)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_experiment(**training):
    """Tiny synthetic experiment that trains in seconds."""
    from dart3d.config import config_from_dict

    return config_from_dict(
        {
            "dataset": {"train_frames": 48, "val_frames": 100, "width": 64, "height": 32, "focal": 60.0,
                        "max_objects": 3, "depth_range": [5.0, 12.0]},
            "model": {"channels": [6, 8, 12], "head_channels": 8, "roi_size": 3, "roi_hidden": 16, "top_k": 4},
            "training": {"epochs": 25, "batch_size": 8, "lr": 0.004, "warmup_epochs": 1.0, "finetune_epochs": 2,
                         **training},
            "seeds": [0],
        }
    )


@pytest.fixture(scope="session")
def toy_model():
    """A standard model trained on the tiny synthetic set (shared across tests)."""
    from dart3d.trainer import train_model

    config = toy_experiment()
    return config, train_model(config, "standard", 0)


# acceptance criteria report: one line per criterion, printed after the run
CRITERIA: dict = {}


class criterion:
    """Context manager that records PASS/FAIL for an acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        import time

        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        took = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        why = self.detail if exc_type is None else (self.detail + " | " if self.detail else "") + f"{exc_type.__name__}: {exc}"
        CRITERIA[self.number] = f"criterion {self.number} {status}: {self.title} ({took:.1f}s) {why}".rstrip()
        return False


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n].splitlines()[0][:1500])
