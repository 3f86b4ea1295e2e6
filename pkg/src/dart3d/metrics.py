"""KITTI-style scoring: rotated BEV / 3D IoU, greedy matching and AP_R40."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .kitti import DIFFICULTY_THRESHOLDS, Difficulty, ObjectLabel, assign_difficulty

TASKS = ("3d", "bev")
DIFFICULTIES = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)
DONTCARE_OVERLAP = 0.5


@dataclass(frozen=True)
class MatchCriteria:
    task: str = "3d"
    iou_threshold: float = 0.7

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must be in (0, 1]")


# --------------------------------------------------------------------------- IoU


def bev_corners(cx: float, cz: float, w: float, l: float, yaw: float) -> np.ndarray:
    """Counter-clockwise (x, z) corners of a ground-plane rectangle."""
    c, s = math.cos(yaw), math.sin(yaw)
    along = np.array([c, -s]) * (l / 2)
    across = np.array([s, c]) * (w / 2)
    center = np.array([cx, cz])
    pts = np.array([center + along + across, center - along + across, center - along - across, center + along - across])
    if _signed_area(pts) < 0:
        pts = pts[::-1]
    return pts


def _signed_area(poly) -> float:
    x, y = np.asarray(poly).T
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clip_convex(subject: list, clipper: np.ndarray) -> list:
    """Sutherland-Hodgman clip of ``subject`` by the CCW convex polygon ``clipper``."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        polygon, output = output, []
        prev = polygon[-1]
        prev_side = side(prev)
        for cur in polygon:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append((cur[0], cur[1]))
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return output


def bev_intersection(box_a, box_b) -> float:
    cx_a, cz_a, w_a, l_a, _ = box_a
    cx_b, cz_b, w_b, l_b, _ = box_b
    if math.hypot(cx_a - cx_b, cz_a - cz_b) > (math.hypot(w_a, l_a) + math.hypot(w_b, l_b)) / 2:
        return 0.0
    pa = bev_corners(*box_a)
    pb = bev_corners(*box_b)
    poly = _clip_convex([tuple(p) for p in pa], pb)
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def bev_iou_rotated(box_a, box_b) -> float:
    """IoU of two rotated ground-plane rectangles ``(cx, cz, w, l, yaw)``."""
    if box_a[2] <= 0 or box_a[3] <= 0 or box_b[2] <= 0 or box_b[3] <= 0:
        return 0.0
    inter = bev_intersection(box_a, box_b)
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def bev_box(label: ObjectLabel) -> tuple:
    h, w, l = label.dims
    return (label.location[0], label.location[2], w, l, label.rotation_y)


def iou_bev(a: ObjectLabel, b: ObjectLabel) -> float:
    return bev_iou_rotated(bev_box(a), bev_box(b))


def iou_3d(a: ObjectLabel, b: ObjectLabel) -> float:
    """Volume IoU; vertical extent is [y - h, y] in the camera frame."""
    ha, hb = a.dims[0], b.dims[0]
    if min(a.dims) <= 0 or min(b.dims) <= 0:
        return 0.0
    ya, yb = a.location[1], b.location[1]
    overlap_h = min(ya, yb) - max(ya - ha, yb - hb)
    if overlap_h <= 0:
        return 0.0
    inter = bev_intersection(bev_box(a), bev_box(b)) * overlap_h
    vol_a = a.dims[0] * a.dims[1] * a.dims[2]
    vol_b = b.dims[0] * b.dims[1] * b.dims[2]
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def box2d_fraction_inside(det_box, region) -> float:
    iw = min(det_box[2], region[2]) - max(det_box[0], region[0])
    ih = min(det_box[3], region[3]) - max(det_box[1], region[1])
    area = (det_box[2] - det_box[0]) * (det_box[3] - det_box[1])
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


def iou_matrix(dets: Sequence[ObjectLabel], gts: Sequence[ObjectLabel], task: str) -> np.ndarray:
    fn = iou_3d if task == "3d" else iou_bev
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if not g.is_dontcare:
                out[i, j] = fn(d, g)
    return out


# --------------------------------------------------------------------------- matching


def _gt_status(gts: Sequence[ObjectLabel], difficulty: Difficulty) -> list[str]:
    status = []
    for g in gts:
        if g.is_dontcare:
            status.append("dontcare")
        elif g.class_name != "Car":
            status.append("ignore")
        else:
            status.append("valid" if assign_difficulty(g) <= difficulty else "ignore")
    return status


def greedy_match(
    detections: Sequence[ObjectLabel],
    gts: Sequence[ObjectLabel],
    criteria: MatchCriteria,
    difficulty: Difficulty,
    ious: np.ndarray | None = None,
):
    """Match score-sorted detections to GTs greedily.

    Returns boolean arrays ``(tp, fp, ignored)`` aligned with ``detections``.
    A detection matched to an ignored GT, lying mostly inside a DontCare box,
    or shorter than the bucket's minimum height counts as neither TP nor FP.
    """
    scores = [d.score if d.score is not None else 0.0 for d in detections]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("detections must be sorted by descending score")
    if ious is None:
        ious = iou_matrix(detections, gts, criteria.task)
    status = _gt_status(gts, difficulty)
    min_height = DIFFICULTY_THRESHOLDS[difficulty.label][0]
    matched = np.zeros(len(gts), dtype=bool)
    n = len(detections)
    tp, fp, ignored = np.zeros(n, bool), np.zeros(n, bool), np.zeros(n, bool)
    for i, det in enumerate(detections):
        best, best_iou = -1, -1.0
        for j in range(len(gts)):
            if matched[j] or status[j] == "dontcare":
                continue
            if ious[i, j] >= criteria.iou_threshold and ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best >= 0:
            matched[best] = True
            if status[best] == "valid":
                tp[i] = True
            else:
                ignored[i] = True
            continue
        in_dontcare = any(
            box2d_fraction_inside(det.box2d, g.box2d) >= DONTCARE_OVERLAP for g, s in zip(gts, status) if s == "dontcare"
        )
        if in_dontcare or det.height2d < min_height:
            ignored[i] = True
        else:
            fp[i] = True
    return tp, fp, ignored


def count_valid_gt(gts: Sequence[ObjectLabel], difficulty: Difficulty) -> int:
    return sum(s == "valid" for s in _gt_status(gts, difficulty))


# --------------------------------------------------------------------------- AP


def ap_r40(scores, tp, fp, num_gt: int) -> float:
    """AP with precision interpolated at recall points 1/40 .. 40/40.

    Operating points are the distinct score thresholds; tied scores enter
    together. Ignored detections must be filtered out beforehand.
    """
    if num_gt <= 0:
        return 0.0
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    fp = np.asarray(fp, dtype=bool)
    keep = tp | fp
    scores, tp = scores[keep], tp[keep]
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    cum_tp = np.cumsum(tp)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    n_tp = cum_tp[last]
    precision = n_tp / (last + 1.0)
    # max precision over operating points with recall >= r, compared in integers:
    # n_tp / num_gt >= k / 40  <=>  40 n_tp >= k num_gt
    best = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(40 * n_tp, np.arange(1, 41) * num_gt, side="left")
    sampled = np.where(pos < n_tp.size, best[np.minimum(pos, n_tp.size - 1)], 0.0)
    return float(sampled.mean())


# --------------------------------------------------------------------------- benchmark


@dataclass
class APResult:
    ap_r40: float
    num_gt: int
    num_tp: int
    num_fp: int
    num_det: int

    @property
    def empty_bucket(self) -> bool:
        return self.num_gt == 0


@dataclass
class EvalReport:
    results: dict = field(default_factory=dict)  # (task, Difficulty) -> APResult

    def ap(self, task: str, difficulty) -> float:
        if isinstance(difficulty, str):
            difficulty = Difficulty[difficulty.upper()]
        return self.results[(task, difficulty)].ap_r40

    def rows(self) -> list[dict]:
        out = []
        for task in TASKS:
            for diff in DIFFICULTIES:
                r = self.results[(task, diff)]
                out.append(
                    {
                        "task": task,
                        "difficulty": diff.label,
                        "ap_r40": round(100.0 * r.ap_r40, 3),
                        "num_gt": r.num_gt,
                        "num_det": r.num_det,
                    }
                )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["task", "difficulty", "ap_r40", "num_gt", "num_det"])
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()


def evaluate_benchmark(
    detections: Mapping[str, Sequence[ObjectLabel]],
    ground_truth: Mapping[str, Sequence[ObjectLabel]],
    criteria: Sequence[MatchCriteria] = (MatchCriteria("3d"), MatchCriteria("bev")),
) -> EvalReport:
    """Pool per-frame matches into a (task x difficulty) AP_R40 grid."""
    if set(detections) != set(ground_truth):
        missing = sorted(set(detections) ^ set(ground_truth))
        raise ValueError(f"frame ids do not align: {missing[:5]}")
    report = EvalReport()
    frame_ids = sorted(ground_truth)
    for crit in criteria:
        pooled = {d: ([], [], [], 0, 0) for d in DIFFICULTIES}
        for fid in frame_ids:
            dets = sorted(
                (d for d in detections[fid] if d.class_name == "Car"),
                key=lambda d: -(d.score if d.score is not None else 0.0),
            )
            gts = list(ground_truth[fid])
            ious = iou_matrix(dets, gts, crit.task)
            for diff in DIFFICULTIES:
                tp, fp, _ = greedy_match(dets, gts, crit, diff, ious)
                scores, tps, fps, n_gt, n_det = pooled[diff]
                scores.extend(d.score for d in dets)
                tps.extend(tp.tolist())
                fps.extend(fp.tolist())
                pooled[diff] = (scores, tps, fps, n_gt + count_valid_gt(gts, diff), n_det + int((tp | fp).sum()))
        for diff, (scores, tps, fps, n_gt, n_det) in pooled.items():
            report.results[(crit.task, diff)] = APResult(
                ap_r40=ap_r40(scores, tps, fps, n_gt),
                num_gt=n_gt,
                num_tp=int(np.sum(tps)),
                num_fp=int(np.sum(fps)),
                num_det=n_det,
            )
    return report
