import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvexplain.explain import AttributionMap
from mvexplain.metrics import (
    auc,
    dilate,
    evaluate_predictions,
    pointing_game,
    positive_class_index,
    topq_iou,
)


def pairwise_auc(scores, labels):
    """Brute-force oracle: average over all (positive, negative) pairs, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_worked_values():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert pairwise_auc([0.4, 0.6, 0.6, 0.9], [0, 0, 1, 1]) == 0.875
    assert auc([0.4, 0.6, 0.6, 0.9], [0, 0, 1, 1]) == 0.875


def test_auc_single_class_error():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_trapezoid_roc():
    rng = np.random.default_rng(0)
    s = np.round(rng.random(200), 1)
    y = rng.integers(0, 2, 200)
    thresholds = np.r_[np.inf, np.unique(s)[::-1]]
    tpr = [((s >= t) & (y == 1)).sum() / (y == 1).sum() for t in thresholds]
    fpr = [((s >= t) & (y == 0)).sum() / (y == 0).sum() for t in thresholds]
    assert auc(s, y) == pytest.approx(np.trapezoid(tpr, fpr), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_equals_pairwise_oracle(rows):
    scores = [s / 8 for s, _ in rows]
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        return
    assert abs(auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


def test_auc_monotone_invariance():
    rng = np.random.default_rng(1)
    s = rng.normal(size=100)
    y = rng.integers(0, 2, 100)
    assert auc(s, y) == auc(np.exp(3 * s) + 2, y)


def test_positive_class():
    assert positive_class_index(["Normal", "Defective"]) == 1
    assert positive_class_index(["Defective", "Normal"]) == 0
    assert positive_class_index(["a", "b", "c"]) == 2


def test_eval_report_consistency():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7], [0.1, 0.9]])
    labels = np.array([0, 1, 1, 0, 1])
    r = evaluate_predictions(probs, labels, ["Normal", "Defective"])
    cm = np.array(r.confusion)
    assert cm.tolist() == [[1, 1], [1, 2]]
    assert r.accuracy == pytest.approx(np.trace(cm) / cm.sum())
    assert r.precision[1] == pytest.approx(2 / 3)
    assert r.recall[1] == pytest.approx(2 / 3)
    assert r.auc == pytest.approx(pairwise_auc(probs[:, 1], labels))
    assert '"accuracy"' in r.to_json()


def _map(per_pixel):
    per_pixel = np.asarray(per_pixel, float)
    return AttributionMap(np.array([0.0]), per_pixel, 0, 1, "lime")


def test_pointing_hit_and_miss():
    mask = np.zeros((20, 20), bool)
    mask[10:14, 10:14] = True
    scores = np.zeros((20, 20))
    scores[11, 12] = 1.0
    assert pointing_game(_map(scores), mask)
    # uniform attribution: argmax tie resolves to flat index 0, outside the dilated mask
    assert not pointing_game(_map(np.ones((20, 20))), mask)


def test_pointing_tolerance_dilation():
    mask = np.zeros((20, 20), bool)
    mask[10, 10] = True
    scores = np.zeros((20, 20))
    scores[10, 13] = 1.0
    assert pointing_game(scores, mask, tolerance_px=3)
    assert not pointing_game(scores, mask, tolerance_px=2)


def test_pointing_empty_mask_error():
    with pytest.raises(ValueError):
        pointing_game(np.ones((4, 4)), np.zeros((4, 4), bool))


def test_pointing_random_baseline_monte_carlo():
    """Random-pixel hit rate equals the dilated mask area fraction."""
    rng = np.random.default_rng(0)
    mask = np.zeros((64, 64), bool)
    mask[20:30, 30:36] = True
    hits = [pointing_game(rng.random((64, 64)), mask) for _ in range(3000)]
    assert np.mean(hits) == pytest.approx(dilate(mask, 3).mean(), abs=0.02)


def test_iou_identity_and_disjoint():
    mask = np.zeros((10, 10), bool)
    mask[:2] = True
    assert topq_iou(mask.astype(float), mask, q=0.2) == 1.0
    assert topq_iou((~mask).astype(float), mask, q=0.2) == 0.0
    with pytest.raises(ValueError):
        topq_iou(mask.astype(float), mask, q=0.0)
    with pytest.raises(ValueError):
        topq_iou(mask.astype(float), np.zeros((10, 10), bool))


def test_iou_random_expectation():
    """Monte-Carlo oracle: a random top-m selection against a mask of fraction m has IoU ~ m/(2-m)."""
    rng = np.random.default_rng(0)
    m = 0.2
    mask = np.zeros(1000, bool)
    mask[:200] = True
    mask = mask.reshape(25, 40)
    vals = [topq_iou(rng.random((25, 40)), mask, q=m) for _ in range(2000)]
    assert np.mean(vals) == pytest.approx(m / (2 - m), abs=0.005)
