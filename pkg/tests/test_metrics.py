import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osaa.metrics import RunMetrics, aggregate, confusion_matrix, macro_f1, micro_f1


def brute_force_macro_f1(pred, truth, C):
    scores = []
    for c in range(C):
        tp = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, truth) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, truth) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(scores) / C


def test_perfect_prediction():
    assert macro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0


def test_hand_confusion_matrix_half():
    # per class: TP=1, FP=1, FN=1, TN=1
    pred, truth = [0, 1, 0, 1], [0, 0, 1, 1]
    np.testing.assert_array_equal(confusion_matrix(pred, truth, 2), [[1, 1], [1, 1]])
    assert macro_f1(pred, truth, 2) == 0.5


@pytest.mark.parametrize("seed", range(100))
def test_macro_f1_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 6))
    n = int(rng.integers(1, 40))
    pred, truth = rng.integers(0, C, n), rng.integers(0, C, n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert macro_f1(pred, truth, C) == pytest.approx(brute_force_macro_f1(pred, truth, C), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scores_invariant_to_sample_order(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
    perm = rng.permutation(30)
    assert macro_f1(pred, truth, 3) == macro_f1(pred[perm], truth[perm], 3)
    assert 0.0 <= macro_f1(pred, truth, 3) <= 1.0


def test_absent_class_warns_and_scores_zero():
    with pytest.warns(UserWarning, match=r"\[2\]"):
        assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)


def test_label_out_of_range():
    with pytest.raises(ValueError, match="truth labels"):
        confusion_matrix([0], [3], 3)


def test_micro_equals_accuracy():
    assert micro_f1([0, 1, 1, 2], [0, 1, 2, 2], 3) == 0.75


def test_aggregate_two_point_closed_form():
    out = aggregate([0.6, 0.8])
    assert out["mean"] == pytest.approx(0.7, abs=1e-15)
    assert out["std"] == pytest.approx(np.sqrt(0.02), abs=1e-15)
    assert aggregate([0.8, 0.6]) == out
    assert aggregate([0.5, 0.5, 0.5])["std"] == 0.0


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate([])


def test_run_metrics_confusion_sums_to_test_size():
    rm = RunMetrics.score(0, [0, 1, 1, 2, 2], [0, 1, 2, 2, 0], 3)
    assert np.sum(rm.confusion) == 5
    assert 0 <= rm.macro_f1 <= 1
