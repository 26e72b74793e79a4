import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import box_iou, random_boxes
from rockwatch.boxes import Detection, iou
from rockwatch.metrics import (
    average_precision,
    evaluate,
    match_detections,
    pr_curve,
    precision_recall,
    size_bucket,
)


def test_iou_values():
    a = Detection(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Detection(5, 5, 1, 1)) == 0.0
    assert iou(a, Detection(1, 0, 2, 2)) == pytest.approx(1 / 3)
    assert iou(Detection(1, 0, 2, 2), a) == iou(a, Detection(1, 0, 2, 2))


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        Detection(0, 0, 0, 2)


def test_matching_examples():
    g = Detection(0, 0, 10, 10)
    m = match_detections([Detection(0, 0, 10, 10, 0.9)], [g])
    assert len(m.true_positives) == 1 and not m.false_positives and not m.false_negatives
    m = match_detections([Detection(0, 0, 10, 10, 0.9), Detection(1, 0, 10, 10, 0.8)], [g])
    assert len(m.true_positives) == 1 and len(m.false_positives) == 1
    assert m.true_positives[0][0].score == 0.9
    # IoU 0.4: a false positive and a missed object
    p = Detection(0, 0, 10, 10 * 0.4, 0.9)
    assert iou(p, g) == pytest.approx(0.4)
    m = match_detections([p], [g])
    assert len(m.false_positives) == 1 and m.false_negatives == [g]


def test_matching_ties_go_to_lower_gt_index():
    gts = [Detection(0, 0, 10, 10), Detection(10, 0, 10, 10)]
    p = Detection(5, 0, 10, 10, 0.9)
    m = match_detections([p], gts, 0.3)
    assert m.true_positives[0][1] == gts[0]


def test_class_aware_matching():
    m = match_detections([Detection(0, 0, 10, 10, 0.9, 1)], [Detection(0, 0, 10, 10, 1.0, 0)])
    assert len(m.false_positives) == 1 and len(m.false_negatives) == 1


def test_precision_recall_conventions():
    g = [Detection(0, 0, 10, 10), Detection(50, 50, 10, 10)]
    assert precision_recall(match_detections([], g)) == (1.0, 0.0)
    assert precision_recall(match_detections([], [])) == (1.0, 1.0)
    m = match_detections([Detection(0, 0, 10, 10, 0.9), Detection(100, 100, 5, 5, 0.8)], g)
    assert precision_recall(m) == (0.5, 0.5)
    m = match_detections([Detection(0, 0, 10, 10, 0.9), Detection(50, 50, 10, 10, 0.8)], g)
    assert precision_recall(m) == (1.0, 1.0)


def test_constructed_three_prediction_case():
    g = [Detection(0, 0, 10, 10), Detection(50, 50, 10, 10)]
    p = [Detection(0, 0, 10, 10, 0.9), Detection(100, 100, 10, 10, 0.8), Detection(50, 50, 10, 10, 0.7)]
    # thresholds 0.9: P=1 R=.5; 0.8: P=.5 R=.5; 0.7: P=2/3 R=1
    # envelope: [1, 2/3, 2/3] -> AP = .5 * 1 + .5 * 2/3
    assert average_precision(p, g) == pytest.approx(5 / 6)
    assert average_precision(p, g) == pytest.approx(oracle_ap([(p, g)], 0.5))


def test_ap_edge_cases():
    g = [Detection(0, 0, 10, 10)]
    assert average_precision([Detection(0, 0, 10, 10, 0.3)], g) == 1.0
    assert average_precision([], g) == 0.0
    assert average_precision([], []) == 1.0
    assert average_precision([Detection(0, 0, 10, 10, 0.3)], []) == 0.0


def oracle_match(preds, gts, thr):
    """Independent greedy matcher: full IoU table, predictions by score."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, -preds[i].w * preds[i].h, preds[i].x, preds[i].y))
    table = [[box_iou(p, g) if p.class_id == g.class_id else -1.0 for g in gts] for p in preds]
    used, tp = set(), 0
    for i in order:
        cands = [(table[i][j], -j) for j in range(len(gts)) if j not in used and table[i][j] >= thr]
        if cands:
            _, negj = max(cands)
            used.add(-negj)
            tp += 1
    return tp


def oracle_ap(images, thr):
    n_gt = sum(len(g) for _, g in images)
    scores = sorted({p.score for ps, _ in images for p in ps}, reverse=True)
    if n_gt == 0:
        return 1.0 if not scores else 0.0
    points = []
    for s in scores:
        tp = n_pred = 0
        for ps, gs in images:
            kept = [p for p in ps if p.score >= s]
            tp += oracle_match(kept, gs, thr)
            n_pred += len(kept)
        points.append((tp / n_gt, tp / n_pred))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        ap += (r - prev_r) * max(p for _, p in points[k:])
        prev_r = r
    return ap


def test_against_threshold_enumeration_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        images = []
        for _ in range(int(rng.integers(1, 4))):
            gts = random_boxes(rng, int(rng.integers(0, 6)), classes=2, extent=60)
            preds = [Detection(g.x + rng.normal(0, 3), g.y + rng.normal(0, 3), g.w, g.h,
                               float(np.round(rng.uniform(0, 1), 1)), g.class_id)
                     for g in gts if rng.random() < 0.7]
            preds += random_boxes(rng, int(rng.integers(0, 5)), classes=2, extent=60)
            preds = [Detection(max(p.x, 0), max(p.y, 0), p.w, p.h, p.score, p.class_id) for p in preds][:10]
            images.append((preds, gts))
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        curve, n_gt = pr_curve(images, thr)
        got = evaluate({str(i): p for i, (p, _) in enumerate(images)},
                       {str(i): g for i, (_, g) in enumerate(images)}, thr)
        assert got["ap"] == pytest.approx(oracle_ap(images, thr), abs=1e-12)
        tp = sum(oracle_match(p, g, thr) for p, g in images)
        assert got["true_positives"] == tp
        recalls = [pt[1] for pt in curve.points]
        assert recalls == sorted(recalls)
        assert 0.0 <= got["ap"] <= 1.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), factor=st.floats(0.01, 0.99))
def test_score_scaling_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    gts = random_boxes(rng, 5, extent=80)
    preds = random_boxes(rng, 8, extent=80)
    scaled = [Detection(p.x, p.y, p.w, p.h, p.score * factor, p.class_id) for p in preds]
    m1, m2 = match_detections(preds, gts), match_detections(scaled, gts)
    assert len(m1.true_positives) == len(m2.true_positives)
    assert precision_recall(m1) == precision_recall(m2)
    assert average_precision(preds, gts) == pytest.approx(average_precision(scaled, gts), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_low_false_positive_never_raises_recall(seed):
    rng = np.random.default_rng(seed)
    gts = random_boxes(rng, 4, extent=80)
    preds = [Detection(g.x, g.y, g.w, g.h, float(rng.uniform(0.5, 1))) for g in gts[:3]]
    extra = Detection(500, 500, 10, 10, 0.1)
    before = precision_recall(match_detections(preds, gts))[1]
    after = precision_recall(match_detections(preds + [extra], gts))[1]
    assert after <= before
    c1, _ = pr_curve([(preds, gts)])
    c2, _ = pr_curve([(preds + [extra], gts)])
    assert c2.points[:len(c1.points)] == c1.points


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), perm_seed=st.integers(0, 10_000))
def test_matching_permutation_invariant(seed, perm_seed):
    rng = np.random.default_rng(seed)
    gts = random_boxes(rng, 5, extent=60)
    preds = random_boxes(rng, 7, extent=60)
    perm = np.random.default_rng(perm_seed).permutation(len(preds))
    a = match_detections(preds, gts)
    b = match_detections([preds[i] for i in perm], gts)
    assert sorted(map(repr, a.true_positives)) == sorted(map(repr, b.true_positives))


def test_size_buckets():
    assert size_bucket(Detection(0, 0, 31, 31)) == "small"
    assert size_bucket(Detection(0, 0, 32, 32)) == "medium"
    assert size_bucket(Detection(0, 0, 96, 96)) == "large"


def test_evaluate_report():
    gt = {"a": [Detection(0, 0, 10, 10), Detection(0, 100, 200, 200)], "b": [Detection(5, 5, 40, 40)]}
    pred = {"a": [Detection(0, 0, 10, 10, 0.9)], "c": [Detection(0, 0, 5, 5, 0.4)]}
    r = evaluate(pred, gt)
    assert (r["true_positives"], r["false_positives"], r["false_negatives"]) == (1, 1, 2)
    assert r["images"] == 3 and r["ground_truth"] == 3
    assert r["recall_by_size"]["small"] == {"ground_truth": 1, "recall": 1.0}
    assert r["recall_by_size"]["large"] == {"ground_truth": 1, "recall": 0.0}
    assert r["pr_curve"][0] == {"score": 0.9, "recall": 1 / 3, "precision": 1.0}
    cut = evaluate(pred, gt, min_score=0.5)
    assert cut["false_positives"] == 0 and cut["ap"] == r["ap"]
    assert math.isclose(evaluate(gt, gt)["ap"], 1.0)
