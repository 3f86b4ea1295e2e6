import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dart3d.kitti import Difficulty, ObjectLabel
from dart3d.metrics import (
    DIFFICULTIES,
    MatchCriteria,
    ap_r40,
    bev_iou_rotated,
    evaluate_benchmark,
    greedy_match,
    iou_3d,
    iou_bev,
)

from metric_oracles import brute_force_ap40, monte_carlo_iou, random_scene, reference_ap, shapely_iou


def car(x=0.0, z=10.0, ry=0.0, dims=(1.5, 1.6, 4.0), y=1.65, box=(10, 10, 60, 60), score=None, cls="Car", occ=0, trunc=0.0):
    return ObjectLabel(cls, trunc, occ, 0.0, box, dims, (x, y, z), ry, score)


def test_bev_iou_examples():
    sq = (0.0, 0.0, 1.0, 1.0, 0.0)
    assert bev_iou_rotated(sq, sq) == pytest.approx(1.0, abs=1e-12)
    assert bev_iou_rotated(sq, (0.5, 0.0, 1.0, 1.0, 0.0)) == pytest.approx(1 / 3, abs=1e-6)
    expect = 2 * (math.sqrt(2) - 1) / (2 - 2 * (math.sqrt(2) - 1))
    assert bev_iou_rotated(sq, (0.0, 0.0, 1.0, 1.0, math.pi / 4)) == pytest.approx(expect, abs=1e-6)
    assert expect == pytest.approx(0.70711, abs=1e-5)


def test_bev_iou_degenerate_is_zero():
    assert bev_iou_rotated((0, 0, 0.0, 1.0, 0), (0, 0, 1.0, 1.0, 0)) == 0.0
    assert bev_iou_rotated((0, 0, 1.0, 1.0, 0), (0, 0, 1.0, -1.0, 0)) == 0.0


def random_box(rng):
    return (rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 3), rng.uniform(0.5, 5), rng.uniform(-np.pi, np.pi))


def test_bev_iou_matches_shapely(rng):
    for _ in range(300):
        a, b = random_box(rng), random_box(rng)
        assert bev_iou_rotated(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-9)


def test_bev_iou_matches_monte_carlo_sample(rng):
    for _ in range(10):
        a, b = random_box(rng), random_box(rng)
        assert abs(bev_iou_rotated(a, b) - monte_carlo_iou(a, b, rng, 200_000)) < 1e-2


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bev_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    v = bev_iou_rotated(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(bev_iou_rotated(b, a), abs=1e-12)
    assert bev_iou_rotated(a, a) == pytest.approx(1.0, abs=1e-12)


def test_iou_3d_examples():
    a = car(dims=(1.0, 1.0, 1.0))
    assert iou_3d(a, a) == pytest.approx(1.0)
    assert iou_3d(a, car(x=0.5, dims=(1.0, 1.0, 1.0))) == pytest.approx(1 / 3, abs=1e-9)
    assert iou_3d(a, car(y=5.0, dims=(1.0, 1.0, 1.0))) == 0.0
    # half the height overlapping halves the intersection volume
    assert iou_3d(a, car(y=1.15, dims=(1.0, 1.0, 1.0))) == pytest.approx(1 / 3, abs=1e-9)
    assert iou_bev(a, car(y=5.0, dims=(1.0, 1.0, 1.0))) == pytest.approx(1.0)


def test_greedy_match_protocol_cases():
    gt = car()
    crit = MatchCriteria("3d", 0.7)
    tp, fp, ign = greedy_match([car(x=0.05, score=0.9)], [gt], crit, Difficulty.MODERATE)
    assert tp.tolist() == [True] and not fp.any()
    dets = [car(x=0.05, score=0.9), car(x=-0.05, score=0.8)]
    tp, fp, ign = greedy_match(dets, [gt], crit, Difficulty.MODERATE)
    assert tp.tolist() == [True, False] and fp.tolist() == [False, True]
    dontcare = car(cls="DontCare", box=(0, 0, 100, 100))
    tp, fp, ign = greedy_match([car(x=30, box=(20, 20, 60, 70), score=0.5)], [dontcare], crit, Difficulty.MODERATE)
    assert ign.tolist() == [True] and not tp.any() and not fp.any()
    with pytest.raises(ValueError):
        greedy_match(dets[::-1], [gt], crit, Difficulty.MODERATE)


def test_match_to_harder_gt_is_ignored():
    hard_gt = car(occ=2)
    tp, fp, ign = greedy_match([car(score=0.9)], [hard_gt], MatchCriteria(), Difficulty.EASY)
    assert ign.tolist() == [True]
    tp, fp, ign = greedy_match([car(score=0.9)], [hard_gt], MatchCriteria(), Difficulty.HARD)
    assert tp.tolist() == [True]


def test_ap_r40_examples():
    assert ap_r40([0.9, 0.8], [True, True], [False, False], 2) == 1.0
    assert ap_r40([], [], [], 3) == 0.0
    assert ap_r40([0.9, 0.8], [False, True], [True, False], 1) == pytest.approx(0.5)
    assert ap_r40([0.5], [True], [False], 0) == 0.0


def test_ap_r40_matches_brute_force_on_enumerated_cases(rng):
    for _ in range(300):
        n = int(rng.integers(0, 9))
        scores = np.round(rng.uniform(0, 1, n), 1).tolist()
        tp = (rng.random(n) < 0.6).tolist()
        num_gt = sum(tp) + int(rng.integers(0, 4))
        fp = [not t for t in tp]
        assert ap_r40(scores, tp, fp, num_gt) == pytest.approx(brute_force_ap40(scores, tp, num_gt), abs=1e-12)


def test_ap_r40_monotone_under_deletion():
    for n in range(1, 6):
        for flags in itertools.product([True, False], repeat=n):
            scores = [1.0 - 0.1 * i for i in range(n)]
            num_gt = max(sum(flags), 1)
            base = ap_r40(scores, list(flags), [not f for f in flags], num_gt)
            for i in range(n):
                rest_s = scores[:i] + scores[i + 1 :]
                rest_f = list(flags[:i] + flags[i + 1 :])
                after = ap_r40(rest_s, rest_f, [not f for f in rest_f], num_gt)
                if flags[i]:
                    assert after <= base + 1e-12
                else:
                    assert after >= base - 1e-12


def test_ground_truth_against_itself_scores_one(small_frames):
    gts = {f.frame_id: f.labels for f in small_frames}
    dets = {f.frame_id: [ObjectLabel(**{**l.__dict__, "score": 0.9}) for l in f.cars()] for f in small_frames}
    report = evaluate_benchmark(dets, gts)
    for (task, diff), r in report.results.items():
        if r.num_gt:
            assert r.ap_r40 == pytest.approx(1.0), (task, diff)


def test_frame_id_mismatch_raises():
    with pytest.raises(ValueError, match="frame ids"):
        evaluate_benchmark({"a": []}, {"b": []})


def test_benchmark_matches_reference_evaluator(rng):
    for _ in range(20):
        frames = [random_scene(rng) for _ in range(int(rng.integers(1, 6)))]
        dets = {str(i): d for i, (d, _) in enumerate(frames)}
        gts = {str(i): g for i, (_, g) in enumerate(frames)}
        report = evaluate_benchmark(dets, gts)
        for task, fn in (("3d", iou_3d), ("bev", iou_bev)):
            for diff in DIFFICULTIES:
                ref = reference_ap([d for d, _ in frames], [g for _, g in frames], fn, diff)
                assert report.ap(task, diff) == pytest.approx(ref, abs=1e-9)


def test_removing_bucket_detections_is_local():
    easy, hard = car(box=(0, 0, 50, 60)), car(x=6.0, box=(100, 0, 130, 30), occ=2)
    gts = {"f": [easy, hard]}
    both = {"f": [car(box=(0, 0, 50, 60), score=0.9), car(x=6.0, box=(100, 0, 130, 30), score=0.8)]}
    only_easy = {"f": [car(box=(0, 0, 50, 60), score=0.9)]}
    full, partial = evaluate_benchmark(both, gts), evaluate_benchmark(only_easy, gts)
    assert full.ap("3d", "Easy") == partial.ap("3d", "Easy") == 1.0
    assert full.ap("3d", "Hard") == 1.0 and partial.ap("3d", "Hard") == pytest.approx(0.5)


def test_report_rows_and_csv():
    report = evaluate_benchmark({"f": []}, {"f": [car()]})
    rows = report.rows()
    assert len(rows) == 6 and rows[0]["ap_r40"] == 0.0
    assert report.to_csv().splitlines()[0] == "task,difficulty,ap_r40,num_gt,num_det"
    empty = evaluate_benchmark({"f": []}, {"f": []})
    assert all(r.empty_bucket and r.ap_r40 == 0.0 for r in empty.results.values())
