import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fasa.errors import DimensionError, InputError
from fasa.metrics import (
    GroundTruth, SegmentationPrediction, adjusted_rand_index, fg_ari, hungarian_miou, mbo_class,
    mbo_instance, mean_best_overlap, saliency_metrics,
)


def comb2(x):
    return x * (x - 1) / 2


def pair_counting_ari(a, b):
    """ARI from explicit pair enumeration (independent of the contingency code)."""
    n = len(a)
    same_a = same_b = both = 0
    for i, j in itertools.combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        same_a += sa
        same_b += sb
        both += sa and sb
    total = comb2(n)
    expected = same_a * same_b / total
    top = 0.5 * (same_a + same_b)
    if top == expected:
        return 1.0
    return (both - expected) / (top - expected)


def exhaustive_iou(a, b):
    inter = sum(1 for x, y in zip(a, b) if x and y)
    union = sum(1 for x, y in zip(a, b) if x or y)
    return inter / union if union else 0.0


def exhaustive_miou(pred, gt):
    best = 0.0
    p = list(range(len(pred)))
    for perm in itertools.permutations(p + [None] * len(gt), len(gt)):
        used = [q for q in perm if q is not None]
        if len(used) != len(set(used)):
            continue
        score = sum(exhaustive_iou(pred[q], g) for q, g in zip(perm, gt) if q is not None)
        best = max(best, score)
    return best / len(gt)


def random_scene(rng, n=12):
    k = int(rng.integers(1, 5))
    labels = rng.integers(0, k + 1, size=n)
    gt = np.stack([labels == i for i in range(1, k + 1)])
    gt = gt[gt.any(axis=1)]
    s = int(rng.integers(1, 6))
    pl = rng.integers(0, s, size=n)
    pred = np.stack([pl == i for i in range(s)])
    return pred, gt


def test_ari_identical_and_relabelled():
    a = np.array([0, 0, 1, 1, 2])
    assert adjusted_rand_index(a, a) == 1.0
    assert adjusted_rand_index(a, (a + 1) * 7) == 1.0


def test_ari_hand_example():
    a = np.array([0, 0, 0, 1, 1, 1])
    b = np.array([0, 0, 1, 1, 2, 2])
    assert adjusted_rand_index(a, b) == pytest.approx(pair_counting_ari(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ari_matches_pair_counting(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 25))
    a, b = rng.integers(0, 4, n), rng.integers(0, 4, n)
    assert abs(adjusted_rand_index(a, b) - pair_counting_ari(a, b)) <= 1e-12


def test_fg_ari_ignores_background():
    gt = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([5, 3, 1, 1, 2, 2])
    assert fg_ari(pred, gt, gt > 0) == 1.0
    with pytest.raises(InputError):
        fg_ari(pred, gt, np.array([1, 0, 0, 0, 0, 0], bool))


def test_ari_length_mismatch():
    with pytest.raises(DimensionError):
        adjusted_rand_index(np.zeros(3), np.zeros(4))


def test_mbo_perfect_and_unmatched():
    gt = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], bool)
    assert mean_best_overlap(gt, gt) == 1.0
    assert mean_best_overlap(np.zeros((0, 4), bool), gt) == 0.0
    with pytest.raises(InputError):
        mean_best_overlap(gt, np.zeros((0, 4), bool))


def test_miou_counts_unmatched_ground_truth_as_zero():
    gt = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], bool)
    pred = np.array([[1, 1, 1, 1]], bool)
    assert hungarian_miou(pred, gt) == pytest.approx(0.25)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mbo_and_miou_match_exhaustive(seed):
    pred, gt = random_scene(np.random.default_rng(seed))
    mbo = np.mean([max(exhaustive_iou(p, g) for p in pred) for g in gt])
    assert abs(mean_best_overlap(pred, gt) - mbo) <= 1e-12
    assert abs(hungarian_miou(pred, gt) - exhaustive_miou(list(pred), list(gt))) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_invariant_to_slot_order(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_scene(rng)
    perm = rng.permutation(len(pred))
    assert hungarian_miou(pred[perm], gt) == pytest.approx(hungarian_miou(pred, gt), abs=1e-12)
    assert mean_best_overlap(pred[perm], gt) == pytest.approx(mean_best_overlap(pred, gt), abs=1e-12)


def test_from_soft_is_a_partition():
    soft = np.random.default_rng(0).random((4, 10))
    pred = SegmentationPrediction.from_soft(soft)
    assert np.array_equal(pred.masks.sum(axis=0), np.ones(10))
    assert np.array_equal(pred.labels(), soft.argmax(axis=0))


def test_class_mbo_merges_instances():
    inst = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], bool)
    gt = GroundTruth(inst, np.array([1, 2, 3]), np.array([1, 1, 2]))
    pred = SegmentationPrediction(np.array([[1, 1, 0, 0], [0, 0, 1, 1]], bool))
    assert mbo_class(pred, gt) == pytest.approx((1.0 + 0.5) / 2)
    assert mbo_instance(pred, gt) == pytest.approx((0.5 + 0.5 + 0.5) / 3)
    assert gt.labels().tolist() == [1, 2, 3, 0]


def test_saliency_scores():
    g = np.array([1, 1, 0, 0], bool)
    s = saliency_metrics(np.array([1, 0, 0, 0], bool), g)
    assert s.acc == 0.75 and s.iou == 0.5
    p, r = 1.0, 0.5
    assert s.f_beta == pytest.approx(1.3 * p * r / (0.3 * p + r))
    assert saliency_metrics(np.zeros(4, bool), g).f_beta == 0.0
    with pytest.raises(DimensionError):
        saliency_metrics(np.zeros(3, bool), g)
