import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from osaa.autodiff import Tensor
from osaa.selection import (apply_mask, build_mask, drop_count, mask_from_scores, minmax_normalize,
                            selection_step)

from helpers import masking_equivalence


def test_minmax_hand_case_and_constant_vector():
    np.testing.assert_array_equal(minmax_normalize([2.0, 4.0, 3.0]), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(minmax_normalize([5.0, 5.0]), [0.0, 0.0])


def test_half_of_64_keeps_32_per_domain():
    rng = np.random.default_rng(0)
    recon = {d: Tensor(rng.random(64)) for d in ("source", "intermediate", "target")}
    task = {d: Tensor(rng.random(64)) for d in recon}
    masks, _ = selection_step(recon, task, {"source": 50.0, "intermediate": 50.0})
    assert masks["source"].n_kept == 32 and masks["intermediate"].n_kept == 32
    assert "target" not in masks


@pytest.mark.parametrize("keep", range(0, 101, 10))
def test_cardinality_formula_over_batch_sizes(keep):
    rng = np.random.default_rng(keep)
    for B in range(1, 65):
        m = mask_from_scores(rng.random(B), keep)
        assert m.n_kept == B - math.ceil((100 - keep) * B / 100 - 1e-9)


def test_drop_count_edges():
    assert drop_count(64, 100) == 0
    assert drop_count(64, 0) == 64
    assert drop_count(3, 50) == 2  # ceil(1.5)
    with pytest.raises(ValueError):
        drop_count(4, 101)


def test_highest_scores_dropped_and_ties_drop_lowest_index():
    m = mask_from_scores([0.1, 0.9, 0.5, 0.9], 50)
    np.testing.assert_array_equal(m.keep, [1, 0, 1, 0])
    assert m.threshold == 0.9
    m = mask_from_scores([1.0, 1.0, 1.0, 1.0], 50)
    np.testing.assert_array_equal(m.keep, [0, 0, 1, 1])
    assert mask_from_scores([0.3, 0.2], 100).threshold == math.inf


def test_scores_sum_normalised_losses():
    m = build_mask([0.0, 10.0, 5.0], [3.0, 1.0, 2.0], 100)
    np.testing.assert_allclose(m.scores, [1.0, 1.0, 1.0])


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 40), st.integers(0, 100), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(B, keep, seed):
    rng = np.random.default_rng(seed)
    r, c = rng.random(B), rng.random(B)
    perm = rng.permutation(B)
    # ties are broken by position, so only distinct scores are order-free
    assume(len(np.unique(build_mask(r, c, keep).scores)) == B)
    a = build_mask(r, c, keep).keep
    b = build_mask(r[perm], c[perm], keep).keep
    np.testing.assert_array_equal(a[perm], b)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 40), st.integers(0, 90), st.integers(0, 2**31 - 1))
def test_larger_keep_portion_keeps_a_superset(B, keep, seed):
    rng = np.random.default_rng(seed)
    r, c = rng.random(B), rng.random(B)
    small = build_mask(r, c, keep).keep
    large = build_mask(r, c, keep + 10).keep
    assert np.all(large >= small)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(1, 99), st.integers(0, 2**31 - 1))
def test_every_kept_score_below_every_dropped(B, keep, seed):
    rng = np.random.default_rng(seed)
    m = build_mask(rng.random(B), rng.random(B), keep)
    kept, dropped = m.scores[m.keep == 1], m.scores[m.keep == 0]
    if kept.size and dropped.size:
        assert kept.max() <= dropped.min() == m.threshold


def test_apply_mask_sums_kept_samples():
    r = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    c = Tensor(np.array([10.0, 20.0, 30.0, 40.0]))
    m = build_mask(r.data, c.data, 50)
    rt, ct = apply_mask(r, c, m)
    assert (rt.item(), ct.item()) == (3.0, 30.0)


def test_apply_mask_length_mismatch():
    m = mask_from_scores([0.1, 0.2], 50)
    with pytest.raises(ValueError, match="mask length 2"):
        apply_mask(Tensor(np.ones(3)), Tensor(np.ones(3)), m)


@pytest.mark.parametrize("seed", range(5))
def test_loss_zeroing_equals_per_sample_gradient_masking(seed):
    assert masking_equivalence(seed) <= 1e-10
