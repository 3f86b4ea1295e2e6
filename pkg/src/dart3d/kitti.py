"""KITTI-format labels and calibration, difficulty buckets and box geometry."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

CLASS_NAMES = ("Car", "DontCare")

# (min box height px, max occlusion, max truncation) per bucket, KITTI benchmark values
DIFFICULTY_THRESHOLDS = {
    "Easy": (40.0, 0, 0.15),
    "Moderate": (25.0, 1, 0.30),
    "Hard": (25.0, 2, 0.50),
}


class LabelParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CalibParseError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


def wrap_angle(a):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    if np.isscalar(a):
        return (float(a) + math.pi) % (2 * math.pi) - math.pi
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class CameraCalibration:
    p2: np.ndarray

    def __post_init__(self):
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(3, 4)
        if not np.isfinite(self.p2[2, 3]):
            raise CalibParseError("P2[2][3] must be finite")
        if self.p2[0, 0] <= 0 or self.p2[1, 1] <= 0:
            raise CalibParseError("focal entries of P2 must be positive")

    @classmethod
    def from_intrinsics(cls, focal: float, cx: float, cy: float) -> "CameraCalibration":
        return cls(np.array([[focal, 0, cx, 0], [0, focal, cy, 0], [0, 0, 1, 0]], dtype=np.float64))

    @property
    def focal(self) -> float:
        return float(self.p2[0, 0])

    @property
    def cx(self) -> float:
        return float(self.p2[0, 2])

    @property
    def cy(self) -> float:
        return float(self.p2[1, 2])


@dataclass
class ObjectLabel:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: tuple
    dims: tuple  # (h, w, l)
    location: tuple  # bottom centre (x, y, z), camera frame
    rotation_y: float
    score: Optional[float] = None

    def __post_init__(self):
        self.box2d = tuple(float(v) for v in self.box2d)
        self.dims = tuple(float(v) for v in self.dims)
        self.location = tuple(float(v) for v in self.location)

    @property
    def height2d(self) -> float:
        return self.box2d[3] - self.box2d[1]

    @property
    def is_dontcare(self) -> bool:
        return self.class_name == "DontCare"

    def center3d(self) -> np.ndarray:
        x, y, z = self.location
        return np.array([x, y - self.dims[0] / 2.0, z])


# --------------------------------------------------------------------------- labels


def _format_label(obj: ObjectLabel) -> str:
    vals = [obj.class_name, f"{obj.truncation:.2f}", str(int(obj.occlusion)), f"{obj.alpha:.2f}"]
    vals += [f"{v:.2f}" for v in obj.box2d]
    vals += [f"{v:.2f}" for v in obj.dims]
    vals += [f"{v:.2f}" for v in obj.location]
    vals.append(f"{obj.rotation_y:.2f}")
    if obj.score is not None:
        vals.append(f"{obj.score:.2f}")
    return " ".join(vals)


def serialize_labels(labels: Sequence[ObjectLabel]) -> str:
    return "".join(_format_label(obj) + "\n" for obj in labels)


def parse_label_file(text: str) -> list[ObjectLabel]:
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise LabelParseError(lineno, f"expected 15 or 16 fields, got {len(fields)}")
        try:
            nums = [float(v) for v in fields[1:]]
            occlusion = int(fields[2])
        except ValueError as exc:
            raise LabelParseError(lineno, f"non-numeric field ({exc})") from None
        labels.append(
            ObjectLabel(
                class_name=fields[0],
                truncation=nums[0],
                occlusion=occlusion,
                alpha=nums[2],
                box2d=tuple(nums[3:7]),
                dims=tuple(nums[7:10]),
                location=tuple(nums[10:13]),
                rotation_y=nums[13],
                score=nums[14] if len(nums) == 15 else None,
            )
        )
    return labels


def parse_calib(text: str) -> CameraCalibration:
    for line in text.splitlines():
        if line.startswith("P2:"):
            parts = line[3:].split()
            if len(parts) != 12:
                raise CalibParseError(f"P2 needs 12 values, got {len(parts)}")
            try:
                values = [float(v) for v in parts]
            except ValueError as exc:
                raise CalibParseError(str(exc)) from None
            return CameraCalibration(np.array(values).reshape(3, 4))
    raise CalibParseError("missing 'P2:' line")


def serialize_calib(calib: CameraCalibration) -> str:
    return "P2: " + " ".join(repr(float(v)) for v in calib.p2.ravel()) + "\n"


# --------------------------------------------------------------------------- geometry


def project_to_image(point3d, calib: CameraCalibration) -> tuple[float, float]:
    x, y, z = (float(v) for v in point3d)
    if z <= 0:
        raise BehindCameraError(f"point has z={z} <= 0")
    u, v, w = calib.p2 @ np.array([x, y, z, 1.0])
    return float(u / w), float(v / w)


def project_points(points: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    """Project an (N, 3) array; no behind-camera check."""
    pts = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ calib.p2.T
    return pts[:, :2] / pts[:, 2:3]


def backproject(u: float, v: float, depth: float, calib: CameraCalibration) -> np.ndarray:
    """Camera-frame point at the given z whose projection is (u, v)."""
    p = calib.p2
    # rows: (P0 - u P2) . X = 0 and (P1 - v P2) . X = 0, solved for x, y with z fixed
    r0 = p[0] - u * p[2]
    r1 = p[1] - v * p[2]
    a = np.array([[r0[0], r0[1]], [r1[0], r1[1]]])
    b = -np.array([r0[2] * depth + r0[3], r1[2] * depth + r1[3]])
    x, y = np.linalg.solve(a, b)
    return np.array([x, y, depth])


def box3d_corners(dims, location, rotation_y: float) -> np.ndarray:
    """Eight (3,) corners of a KITTI box; first four on the bottom face."""
    h, w, l = dims
    xs = np.array([l, l, -l, -l, l, l, -l, -l]) / 2.0
    ys = np.array([0, 0, 0, 0, -h, -h, -h, -h], dtype=np.float64)
    zs = np.array([w, -w, -w, w, w, -w, -w, w]) / 2.0
    c, s = math.cos(rotation_y), math.sin(rotation_y)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (rot @ np.stack([xs, ys, zs])).T + np.asarray(location, dtype=np.float64)


def ray_angle(x: float, z: float) -> float:
    return math.atan2(x, z)


def alpha_to_rotation_y(alpha: float, x: float, z: float) -> float:
    return wrap_angle(alpha + ray_angle(x, z))


def rotation_y_to_alpha(rotation_y: float, x: float, z: float) -> float:
    return wrap_angle(rotation_y - ray_angle(x, z))


def assign_difficulty(label: ObjectLabel) -> Difficulty:
    if label.is_dontcare:
        return Difficulty.IGNORED
    height = label.height2d
    for level, name in ((Difficulty.EASY, "Easy"), (Difficulty.MODERATE, "Moderate"), (Difficulty.HARD, "Hard")):
        min_h, max_occ, max_trunc = DIFFICULTY_THRESHOLDS[name]
        if height >= min_h and label.occlusion <= max_occ and label.truncation <= max_trunc:
            return level
    return Difficulty.IGNORED


@dataclass
class Frame:
    image: np.ndarray  # H x W x 3, [0, 255]
    calib: CameraCalibration
    labels: list = field(default_factory=list)
    frame_id: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def cars(self) -> list[ObjectLabel]:
        return [obj for obj in self.labels if obj.class_name == "Car"]


def flip_frame(frame: Frame) -> Frame:
    """Mirror a frame left-right, adjusting the camera matrix and every label exactly.

    A camera point (x, y, z) maps to (-x, y, z) and pixel column u maps to W - u.
    """
    w = frame.width
    mirror = np.diag([-1.0, 1.0, 1.0, 1.0])
    p2 = frame.calib.p2
    flipped_p2 = np.stack([w * p2[2] - p2[0], p2[1], p2[2]]) @ mirror
    labels = []
    for obj in frame.labels:
        x1, y1, x2, y2 = obj.box2d
        x, y, z = obj.location
        if obj.is_dontcare:  # 3D fields are placeholders
            labels.append(replace(obj, box2d=(w - x2, y1, w - x1, y2)))
            continue
        labels.append(
            ObjectLabel(
                class_name=obj.class_name,
                truncation=obj.truncation,
                occlusion=obj.occlusion,
                alpha=float(wrap_angle(math.pi - obj.alpha)),
                box2d=(w - x2, y1, w - x1, y2),
                dims=obj.dims,
                location=(-x, y, z),
                rotation_y=float(wrap_angle(math.pi - obj.rotation_y)),
                score=obj.score,
            )
        )
    return Frame(frame.image[:, ::-1], CameraCalibration(flipped_p2), labels, frame.frame_id)
