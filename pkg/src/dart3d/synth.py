"""Synthetic pinhole-camera street scenes with shaded cuboid cars.

Frames are rendered with a painter's algorithm on top of a textured ground
plane and a sky gradient. Labels are exact: the 2D box of every car is the
clipped bounding rectangle of its eight projected corners.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .kitti import (
    CameraCalibration,
    Frame,
    ObjectLabel,
    box3d_corners,
    parse_calib,
    parse_label_file,
    project_points,
    rotation_y_to_alpha,
    serialize_calib,
    serialize_labels,
    wrap_angle,
)

# corner indices from box3d_corners; face 0 is the heading (+x local) face
FACES = (
    (0, 1, 5, 4),
    (2, 3, 7, 6),
    (3, 0, 4, 7),
    (1, 2, 6, 5),
    (0, 1, 2, 3),
    (4, 5, 6, 7),
)
LIGHT_DIR = np.array([0.35, -1.0, -0.45]) / np.linalg.norm([0.35, -1.0, -0.45])
HAZE = np.array([185.0, 200.0, 215.0])


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    width: int = 384
    height: int = 128
    focal: float = 250.0
    cx: float | None = None
    cy: float | None = None
    camera_height: float = 1.65
    min_objects: int = 1
    max_objects: int = 6
    depth_range: tuple = (6.0, 28.0)
    height_range: tuple = (1.42, 1.60)
    width_range: tuple = (1.58, 1.78)
    length_range: tuple = (3.7, 4.3)
    max_truncation: float = 0.6
    min_separation: float = 5.0
    pixel_noise: float = 2.0
    aligned_fraction: float = 0.0  # share of cars heading along the road (ry near +-pi/2)
    aligned_spread: float = 0.2

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SceneConfigError("image size must be positive")
        if self.focal <= 0:
            raise SceneConfigError("focal length must be positive")
        if not 1 <= self.min_objects <= self.max_objects:
            raise SceneConfigError("need 1 <= min_objects <= max_objects")
        if not 0.0 <= self.aligned_fraction <= 1.0:
            raise SceneConfigError("aligned_fraction must lie in [0, 1]")
        if self.depth_range[0] <= 0 or self.depth_range[1] < self.depth_range[0]:
            raise SceneConfigError("invalid depth_range")
        for name in ("depth_range", "height_range", "width_range", "length_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def calibration(self) -> CameraCalibration:
        cx = self.width / 2.0 if self.cx is None else self.cx
        cy = self.height * 0.45 if self.cy is None else self.cy
        return CameraCalibration.from_intrinsics(self.focal, cx, cy)


def _background(cfg: SceneConfig, calib: CameraCalibration, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    img = np.empty((h, w, 3))
    t = np.clip(vv / max(calib.cy, 1.0), 0, 1)[..., None]
    sky_top = np.array([95.0, 140.0, 205.0]) + rng.uniform(-15, 15, 3)
    img[:] = sky_top * (1 - t) + HAZE * t

    below = vv > calib.cy + 0.5
    dv = np.where(below, vv - calib.cy, 1.0)
    z = calib.focal * cfg.camera_height / dv
    x = (uu - calib.cx) * z / calib.focal
    tile = rng.uniform(1.5, 3.0)
    checker = ((np.floor(x / tile) + np.floor(z / tile)) % 2)[..., None]
    base = np.array([92.0, 90.0, 86.0]) + rng.uniform(-12, 12, 3)
    ground = base + 14.0 * checker
    lane = (np.abs(x - rng.uniform(-4, 4)) < 0.12)[..., None]
    ground = np.where(lane, np.array([215.0, 215.0, 200.0]), ground)
    fade = np.exp(-z / 90.0)[..., None]
    ground = ground * fade + HAZE * (1 - fade)
    img = np.where(below[..., None], ground, img)
    return img


def _face_color(base: np.ndarray, normal: np.ndarray, depth: float, heading: bool) -> tuple:
    shade = 0.4 + 0.6 * max(0.0, float(-normal @ LIGHT_DIR))
    color = base * shade
    if heading:
        color = 0.45 * color + 0.55 * np.array([245.0, 225.0, 90.0])
    fade = math.exp(-depth / 90.0)
    color = color * fade + HAZE * (1 - fade)
    return tuple(int(round(c)) for c in np.clip(color, 0, 255))


def _visible_faces(corners: np.ndarray):
    center = corners.mean(axis=0)
    for idx, face in enumerate(FACES):
        pts = corners[list(face)]
        fc = pts.mean(axis=0)
        normal = fc - center
        normal = normal / np.linalg.norm(normal)
        if normal @ fc < 0:
            yield idx, face, normal


def _sample_objects(cfg: SceneConfig, calib: CameraCalibration, rng: np.random.Generator):
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed = []
    attempts = 0
    while len(placed) < count and attempts < 200:
        attempts += 1
        z = rng.uniform(*cfg.depth_range)
        u = rng.uniform(-0.1 * cfg.width, 1.1 * cfg.width)
        x = (u - calib.cx) * z / calib.focal
        dims = (rng.uniform(*cfg.height_range), rng.uniform(*cfg.width_range), rng.uniform(*cfg.length_range))
        ry = rng.uniform(-math.pi, math.pi)
        if cfg.aligned_fraction > 0 and rng.random() < cfg.aligned_fraction:
            ry = wrap_angle(math.copysign(math.pi / 2, ry) + rng.normal(0.0, cfg.aligned_spread))
        # 2-decimal values so stored labels describe the rendered geometry exactly
        dims = tuple(round(v, 2) for v in dims)
        loc = (round(x, 2), round(cfg.camera_height, 2), round(z, 2))
        ry = round(ry, 2)
        corners = box3d_corners(dims, loc, ry)
        if corners[:, 2].min() < 1.0:
            continue
        if any(math.hypot(loc[0] - p[1][0], loc[2] - p[1][2]) < cfg.min_separation for p in placed):
            continue
        uv = project_points(corners, calib)
        raw = (uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
        clipped = (
            min(max(raw[0], 0.0), cfg.width),
            min(max(raw[1], 0.0), cfg.height),
            min(max(raw[2], 0.0), cfg.width),
            min(max(raw[3], 0.0), cfg.height),
        )
        raw_area = (raw[2] - raw[0]) * (raw[3] - raw[1])
        clip_area = max(clipped[2] - clipped[0], 0.0) * max(clipped[3] - clipped[1], 0.0)
        truncation = 1.0 - clip_area / raw_area
        if truncation > cfg.max_truncation or clipped[2] - clipped[0] < 2 or clipped[3] - clipped[1] < 2:
            continue
        placed.append((dims, loc, ry, corners, uv, clipped, truncation))
    return placed


def synth_scene(config: SceneConfig, seed: int) -> Frame:
    """Render one deterministic synthetic frame."""
    rng = np.random.default_rng(seed)
    calib = config.calibration()
    background = _background(config, calib, rng)
    objects = _sample_objects(config, calib, rng)
    colors = [rng.uniform(50, 230, 3) for _ in objects]

    canvas = Image.fromarray(np.zeros((config.height, config.width, 3), dtype=np.uint8))
    painted = Image.new("L", (config.width, config.height), 0)
    ids = Image.new("L", (config.width, config.height), 0)
    draw, pdraw, idraw = ImageDraw.Draw(canvas), ImageDraw.Draw(painted), ImageDraw.Draw(ids)
    silhouettes = []

    order = sorted(range(len(objects)), key=lambda i: -np.linalg.norm(objects[i][1]))
    for i in order:
        dims, loc, ry, corners, uv, _, _ = objects[i]
        mask = Image.new("L", (config.width, config.height), 0)
        mdraw = ImageDraw.Draw(mask)
        for face_idx, face, normal in _visible_faces(corners):
            poly = [tuple(uv[k]) for k in face]
            depth = float(corners[list(face), 2].mean())
            draw.polygon(poly, fill=_face_color(colors[i], normal, depth, face_idx == 0))
            pdraw.polygon(poly, fill=255)
            idraw.polygon(poly, fill=i + 1)
            mdraw.polygon(poly, fill=1)
        silhouettes.append((i, np.asarray(mask).sum()))

    fg = np.asarray(canvas, dtype=np.float64)
    alpha = (np.asarray(painted) > 0)[..., None]
    img = np.where(alpha, fg, background)
    img = img + rng.normal(0.0, config.pixel_noise, img.shape)
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)

    id_buf = np.asarray(ids)
    full = dict(silhouettes)
    labels = []
    for i, (dims, loc, ry, corners, uv, clipped, truncation) in enumerate(objects):
        visible = (id_buf == i + 1).sum() / max(full[i], 1)
        if visible < 0.1:
            labels.append(
                ObjectLabel("DontCare", -1.0, -1, -10.0, clipped, (-1.0, -1.0, -1.0), (-1000.0, -1000.0, -1000.0), -10.0)
            )
            continue
        occlusion = 0 if visible >= 0.85 else (1 if visible >= 0.5 else 2)
        labels.append(
            ObjectLabel(
                class_name="Car",
                truncation=float(truncation),
                occlusion=occlusion,
                alpha=rotation_y_to_alpha(ry, loc[0], loc[2]),
                box2d=clipped,
                dims=dims,
                location=loc,
                rotation_y=ry,
            )
        )
    return Frame(image=image, calib=calib, labels=labels, frame_id=f"{seed:06d}")


def synth_dataset(config: SceneConfig, seeds) -> list[Frame]:
    return [synth_scene(config, int(s)) for s in seeds]


def write_dataset(root, frames, extra: dict | None = None) -> Path:
    """Write frames as a KITTI-style directory plus manifest.json."""
    root = Path(root)
    for sub in ("image_2", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for frame in frames:
        Image.fromarray(frame.image).save(root / "image_2" / f"{frame.frame_id}.png")
        (root / "label_2" / f"{frame.frame_id}.txt").write_text(serialize_labels(frame.labels))
        (root / "calib" / f"{frame.frame_id}.txt").write_text(serialize_calib(frame.calib))
    manifest = {"frame_ids": [f.frame_id for f in frames]}
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_dataset(root) -> list[Frame]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        frame_ids = json.loads(manifest_path.read_text())["frame_ids"]
    else:
        frame_ids = sorted(p.stem for p in (root / "label_2").glob("*.txt"))
    frames = []
    for fid in frame_ids:
        image = np.asarray(Image.open(root / "image_2" / f"{fid}.png").convert("RGB"))
        calib = parse_calib((root / "calib" / f"{fid}.txt").read_text())
        labels = parse_label_file((root / "label_2" / f"{fid}.txt").read_text())
        frames.append(Frame(image=image, calib=calib, labels=labels, frame_id=fid))
    return frames


def scene_config_dict(config: SceneConfig) -> dict:
    return asdict(config)
