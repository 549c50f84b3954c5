import numpy as np
import pytest

import oracles
from scenefusion.metrics import (
    COCO_POINTS,
    COCO_THRESHOLDS,
    KITTI_POINTS,
    DifficultyBucket,
    ImageDetections,
    ImageTruth,
    average_precision,
    iou,
    kitti_ap,
    map_at,
    match,
    top1_accuracy,
)


def to_inputs(images):
    dets, gts = [], []
    for d, g in images:
        dets.append(ImageDetections(np.array([b for b, _, _ in d], dtype=float).reshape(-1, 4),
                                    np.array([s for _, s, _ in d], dtype=float),
                                    np.array([c for _, _, c in d], dtype=int)))
        gts.append(ImageTruth(np.array([b for b, _ in g], dtype=float).reshape(-1, 4),
                              np.array([c for _, c in g], dtype=int)))
    return dets, gts


def single_class_matches(statuses_scores, n_gt):
    """Build (scores, MatchResult) input for average_precision from a ranked list."""
    from scenefusion.metrics import MatchResult

    scores = np.array([s for s, _ in statuses_scores])
    tp = np.array([t == "tp" for _, t in statuses_scores], dtype=bool)
    ign = np.array([t == "ign" for _, t in statuses_scores], dtype=bool)
    return [(scores, MatchResult(tp, np.full(len(tp), -1), ign, n_gt))]


# ---------------------------------------------------------------- iou


def test_iou_examples():
    assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)
    assert iou([1, 1, 1, 4], [0, 0, 5, 5]) == 0.0  # zero area


def test_iou_properties_random():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = np.sort(rng.integers(0, 20, (2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]].astype(float)
        b = np.sort(rng.integers(0, 20, (2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]].astype(float)
        v = iou(a, b)
        assert 0 <= v <= 1 and v == iou(b, a)
        assert abs(v - oracles.iou(list(a), list(b))) < 1e-12


# ---------------------------------------------------------------- match


def test_match_examples():
    gt = np.array([[0.0, 0, 10, 10]])
    m = match(np.array([[0.0, 0, 10, 6]]), np.array([0.5]), gt, 0.5)
    assert m.tp.tolist() == [True]
    m = match(np.array([[0.0, 0, 10, 10], [0, 0, 10, 9]]), np.array([0.6, 0.9]), gt, 0.5)
    assert m.tp.tolist() == [False, True] and m.matched_gt.tolist() == [-1, 0]


def test_match_crossing_assignment_follows_greedy_rule():
    # A overlaps G1 best, B only G1; greedy lets A take G1 so B becomes FP
    g1, g2 = [0.0, 0, 10, 10], [4.0, 0, 14, 10]
    a, b = [1.0, 0, 11, 10], [0.0, 0, 9, 10]
    gts = np.array([g1, g2])
    m = match(np.array([a, b]), np.array([0.9, 0.8]), gts, 0.5)
    assert oracles.iou(a, g1) > oracles.iou(a, g2) >= 0.5 and oracles.iou(b, g2) < 0.5
    assert m.matched_gt.tolist() == [0, -1]
    # enumerate every assignment and keep those satisfying the greedy rule
    # (each det, in score order, takes the best still-free GT above threshold)
    valid = []
    for ja in (-1, 0, 1):
        for jb in (-1, 0, 1):
            if ja == jb != -1:
                continue
            best_a = max((0, 1), key=lambda j: oracles.iou(a, [g1, g2][j]))
            if ja != best_a:
                continue
            free = [j for j in (0, 1) if j != ja]
            best_b = max(free, key=lambda j: oracles.iou(b, [g1, g2][j]))
            want_b = best_b if oracles.iou(b, [g1, g2][best_b]) >= 0.5 else -1
            if jb == want_b:
                valid.append((ja, jb))
    assert valid == [(0, -1)]


def test_match_never_reuses_gt_and_equals_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        images = oracles.random_instance(rng, n_images=1)
        d, g = images[0]
        boxes = np.array([b for b, _, _ in d]).reshape(-1, 4)
        scores = np.array([s for _, s, _ in d])
        gts = np.array([b for b, _ in g]).reshape(-1, 4)
        for thr in (0.3, 0.5, 0.75):
            m = match(boxes, scores, gts, thr)
            used = m.matched_gt[m.matched_gt >= 0]
            assert len(set(used.tolist())) == len(used)
            ref = oracles.match([b for b, _, _ in d], list(scores), [b for b, _ in g], thr)
            assert ["tp" if t else "fp" for t in m.tp] == ref


# ---------------------------------------------------------------- AP


def test_ap_examples():
    assert average_precision(single_class_matches([(0.9, "tp")], 1)) == 1.0
    assert average_precision(single_class_matches([(0.9, "fp")], 1)) == 0.0
    assert average_precision(single_class_matches([], 0)) is None
    ranked = [(0.9, "tp"), (0.8, "fp"), (0.7, "tp")]
    exact = average_precision(single_class_matches(ranked, 2), method="area")
    assert exact == pytest.approx((1.0 + 2 / 3) / 2, abs=1e-12)
    sampled = average_precision(single_class_matches(ranked, 2))
    assert sampled == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101, abs=1e-12)
    assert sampled == pytest.approx(oracles.ap(ranked, 2, oracles.COCO), abs=1e-12)


def test_ap_random_vs_oracles():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n = int(rng.integers(0, 12))
        ranked = [(float(rng.integers(1, 6)) / 5, "tp" if rng.uniform() < 0.5 else "fp") for _ in range(n)]
        n_gt = sum(t == "tp" for _, t in ranked) + int(rng.integers(0, 3))
        if n_gt == 0:
            continue
        inp = single_class_matches(ranked, n_gt)
        assert abs(average_precision(inp) - oracles.ap(ranked, n_gt, oracles.COCO)) < 1e-12
        assert abs(average_precision(inp, KITTI_POINTS) - oracles.ap(ranked, n_gt, oracles.KITTI)) < 1e-12
        assert abs(average_precision(inp, method="area") - oracles.area_ap(ranked, n_gt)) < 1e-12


def test_ap_does_not_drop_when_fp_removed():
    rng = np.random.default_rng(3)
    for _ in range(200):
        ranked = [(float(rng.uniform()), "tp" if rng.uniform() < 0.5 else "fp") for _ in range(8)]
        n_gt = 8
        fps = [i for i, (_, t) in enumerate(ranked) if t == "fp"]
        if not fps:
            continue
        fewer = [r for i, r in enumerate(ranked) if i != fps[int(rng.integers(len(fps)))]]
        assert average_precision(single_class_matches(fewer, n_gt)) >= average_precision(
            single_class_matches(ranked, n_gt)) - 1e-15


def test_equal_scores_follow_input_order():
    ranked = [(0.5, "fp"), (0.5, "tp")]
    inp = single_class_matches(ranked, 1)
    assert average_precision(inp) == pytest.approx(oracles.ap(ranked, 1, oracles.COCO))
    assert average_precision(inp) == pytest.approx(0.5)


# ---------------------------------------------------------------- mAP


def test_map_perfect_and_absent():
    images = [([([0.0, 0, 10, 10], 0.9, 0), ([20.0, 20, 40, 30], 0.8, 1)], [([0.0, 0, 10, 10], 0), ([20.0, 20, 40, 30], 1)])]
    dets, gts = to_inputs(images)
    assert map_at(dets, gts, (0.5,)) == 1.0
    assert map_at(dets, gts, COCO_THRESHOLDS) == 1.0
    empty_d, empty_g = to_inputs([([([0.0, 0, 5, 5], 0.5, 0)], [])])
    assert map_at(empty_d, empty_g) is None


def test_map_random_vs_oracle():
    rng = np.random.default_rng(4)
    for _ in range(200):
        images = oracles.random_instance(rng)
        dets, gts = to_inputs(images)
        for thrs in [(0.5,), (0.75,), COCO_THRESHOLDS]:
            got = map_at(dets, gts, thrs)
            refs = [oracles.mean_ap(images, t, oracles.COCO) for t in thrs]
            if refs[0] is None:
                assert got is None
            else:
                assert abs(got - sum(refs) / len(refs)) < 1e-12


def test_thresholds():
    assert COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    assert len(COCO_POINTS) == 101 and len(KITTI_POINTS) == 40 and KITTI_POINTS[0] == 1 / 40


# ---------------------------------------------------------------- KITTI


def test_kitti_buckets_nest_and_scale():
    e, m, h = (DifficultyBucket.named(n) for n in ("easy", "moderate", "hard"))
    assert (e.min_height, m.min_height, h.min_height) == (40, 25, 15)
    assert DifficultyBucket.named("easy", 256).min_height == 80


def test_kitti_examples():
    easy = DifficultyBucket.named("easy")
    tall = [0.0, 0, 30, 50]
    short = [60.0, 60, 80, 80]  # 20 px: hard only
    dets, gts = to_inputs([([(tall, 0.9, 0)], [(tall, 0)])])
    assert kitti_ap(dets, gts, easy) == 1.0
    # the hard-only GT and a detection on it change nothing for easy
    dets, gts = to_inputs([([(tall, 0.9, 0), (short, 0.95, 0)], [(tall, 0), (short, 0)])])
    assert kitti_ap(dets, gts, easy) == 1.0
    assert kitti_ap(dets, gts, DifficultyBucket.named("hard")) == 1.0
    dets, gts = to_inputs([([(short, 0.95, 0)], [(short, 0)])])
    assert kitti_ap(dets, gts, easy) is None


def test_kitti_random_vs_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        images = oracles.random_instance(rng)
        dets, gts = to_inputs(images)
        for name in ("easy", "moderate", "hard"):
            b = DifficultyBucket.named(name, 64)
            got = kitti_ap(dets, gts, b)
            ref = oracles.mean_ap(images, 0.5, oracles.KITTI, b.min_height)
            assert (got is None and ref is None) or abs(got - ref) < 1e-12


# ---------------------------------------------------------------- top1


def test_top1():
    assert top1_accuracy(["a", "b"], ["a", "b"]) == 100.0
    assert top1_accuracy(["a", "b"], ["b", "a"]) == 0.0
    assert top1_accuracy(list("abca"), list("abcb")) == 75.0
    with pytest.raises(ValueError):
        top1_accuracy([], [])
    with pytest.raises(ValueError):
        top1_accuracy(["a"], ["a", "b"])
