import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osaa import autodiff as ad
from osaa.autodiff import Tensor, gradcheck
from osaa.autodiff import ops

import oracles


def rand(rng, *shape, dtype=np.float64):
    return rng.standard_normal(shape).astype(dtype)


# ---------------------------------------------------------------- tape mechanics

def test_gradcheck_hand_case():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    rep = gradcheck(lambda x: (x * x).sum(), x, eps=1e-5)
    assert rep.passed
    assert rep.max_abs_err < 1e-9 and rep.n_checked == 2
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_shared_node_visited_once_and_grads_accumulate():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x          # reused twice below
    z = y + y * x
    visited = z.backward()
    # z = x^2 + x^3, dz/dx = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [33.0])
    ids = [id(n) for n in visited]
    assert len(ids) == len(set(ids))


def test_leaf_grad_accumulates_over_backward_calls():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_no_graph_without_requires_grad():
    a = Tensor(np.ones(3))
    out = ops.exp(a)
    assert out.parents == () and not out.requires_grad


def test_broadcast_gradients_unbroadcast():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))
    np.testing.assert_allclose(a.grad, np.tile(np.arange(4.0), (3, 1)))


# ---------------------------------------------------------------- elementwise ops

def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tensor(np.zeros((1, 4))), axis=1)
    np.testing.assert_array_equal(out.data, np.full((1, 4), 0.25))


def test_log_softmax_overflow_safe():
    out = ad.log_softmax(Tensor(np.array([[1000.0, 0.0]])), axis=1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.0, -1000.0]], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 7), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one_and_shift_invariant(rows, cols, shift, seed):
    x = rand(np.random.default_rng(seed), rows, cols) * 5
    p = ad.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(ad.softmax(Tensor(x + shift), axis=1).data, p, atol=1e-12)
    np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(x), axis=1).data), p, atol=1e-12)


def test_log_sigmoid_stable_at_extremes():
    out = ad.log_sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_allclose(out, [-800.0, -np.log(2.0), 0.0], atol=1e-12)


def test_grad_reverse_identity_forward_negated_backward():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = ad.grad_reverse(x, 1.0)
    np.testing.assert_array_equal(y.data, x.data)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [-1.0, -1.0])


def test_grad_reverse_zero_coeff_blocks_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    ad.grad_reverse(x, 0.0).sum().backward()
    assert np.all(x.grad == 0)


def test_grad_reverse_rejects_negative_coeff():
    with pytest.raises(ValueError, match="coeff"):
        ad.grad_reverse(Tensor(np.ones(2)), -0.5)


def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones((200, 50)))
    assert ad.dropout(x, 0.4, np.random.default_rng(0), training=False) is x
    y = ad.dropout(x, 0.4, np.random.default_rng(0), training=True).data
    survivors = y[y != 0]
    np.testing.assert_allclose(survivors, 1 / 0.6, rtol=1e-12)
    assert abs((y != 0).mean() - 0.6) < 0.02


def test_mse_per_sample_is_squared_norm():
    a, b = np.arange(6.0).reshape(2, 1, 3), np.zeros((2, 1, 3))
    np.testing.assert_array_equal(ad.mse_per_sample(Tensor(a), Tensor(b)).data, [5.0, 50.0])


# ---------------------------------------------------------------- conv and pooling vs loop oracles

def test_conv1d_hand_case():
    rng = np.random.default_rng(0)
    x, w, b = rand(rng, 2, 3, 16), rand(rng, 4, 3, 9), rand(rng, 4)
    out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (2, 4, 8)
    assert oracles.rel_err(out, oracles.conv1d(x, w, b)) < 1e-12


def conv_case(rng):
    B, C, O = (int(v) for v in rng.integers(1, 4, size=3))
    K = int(rng.integers(1, 10))
    stride = int(rng.integers(1, 4))
    padding = int(rng.integers(0, K))
    L = int(rng.integers(K, K + 20))
    return B, C, O, K, stride, padding, L


@pytest.mark.parametrize("seed", range(25))
def test_conv1d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    B, C, O, K, stride, padding, L = conv_case(rng)
    x, w, b = rand(rng, B, C, L), rand(rng, O, C, K), rand(rng, O)
    out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    assert oracles.rel_err(out, oracles.conv1d(x, w, b, stride, padding)) < 1e-12


@pytest.mark.parametrize("seed", range(25))
def test_conv_transpose1d_matches_scatter_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    B, C, O, K, stride, padding, L = conv_case(rng)
    x, w, b = rand(rng, B, C, L), rand(rng, C, O, K), rand(rng, O)
    out = ad.conv_transpose1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    assert out.shape == (B, O, (L - 1) * stride - 2 * padding + K)
    assert oracles.rel_err(out, oracles.conv_transpose1d(x, w, b, stride, padding)) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_conv_transpose_is_adjoint_of_conv(seed):
    # <conv(x), y> == <x, conv_transpose(y)> with the same weight, no bias
    rng = np.random.default_rng(seed)
    B, C, O, K, stride, padding, L = conv_case(rng)
    # trim L so the strided windows end flush with the padded input; then the lengths agree
    L -= (L + 2 * padding - K) % stride
    w = rand(rng, O, C, K)
    x = rand(rng, B, C, L)
    cx = ad.conv1d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    y = rand(rng, *cx.shape)
    ty = ad.conv_transpose1d(Tensor(y), Tensor(w), stride=stride, padding=padding).data
    assert ty.shape == x.shape
    lhs = float((cx * y).sum())
    rhs = float((x * ty).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv1d_is_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    w = rand(rng, 3, 2, 5)
    x1, x2 = rand(rng, 2, 2, 12), rand(rng, 2, 2, 12)
    f = lambda x: ad.conv1d(Tensor(x), Tensor(w), padding=2).data  # noqa: E731
    np.testing.assert_allclose(f(a * x1 + b * x2), a * f(x1) + b * f(x2), atol=1e-10)


def test_conv1d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="C_in=3"):
        ad.conv1d(Tensor(np.zeros((1, 3, 10))), Tensor(np.zeros((4, 2, 3))))


def test_maxpool_hand_case_and_tie_rule():
    vals, idx = ad.maxpool1d(Tensor(np.array([[[3.0, 1.0, 4.0, 1.0]]])), 2)
    np.testing.assert_array_equal(vals.data, [[[3.0, 4.0]]])
    np.testing.assert_array_equal(idx.index, [[[0, 2]]])
    _, idx = ad.maxpool1d(Tensor(np.ones((1, 1, 6))), 3)
    np.testing.assert_array_equal(idx.index, [[[0, 3]]])


def test_maxpool_rejects_oversized_window():
    with pytest.raises(ValueError, match="window"):
        ad.maxpool1d(Tensor(np.zeros((1, 1, 3))), 4)


@pytest.mark.parametrize("seed", range(20))
def test_pool_and_unpool_match_loop_oracle_bitwise(seed):
    rng = np.random.default_rng(seed)
    window = int(rng.integers(1, 5))
    L = int(rng.integers(window, 30))
    x = rand(rng, 2, 3, L, dtype=np.float32)
    if seed % 4 == 0:
        x = np.round(x)  # plenty of ties
    vals, idx = ad.maxpool1d(Tensor(x), window)
    ov, oi = oracles.maxpool1d(x, window)
    assert vals.dtype == np.float32
    np.testing.assert_array_equal(vals.data, ov)
    np.testing.assert_array_equal(idx.index, oi)
    up = ad.maxunpool1d(vals, idx).data
    np.testing.assert_array_equal(up, oracles.maxunpool1d(ov, oi, L))


@pytest.mark.parametrize("seed", range(10))
def test_adaptive_pool_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 40))
    n = int(rng.integers(1, L + 1))
    x = rand(rng, 2, 3, L)
    assert oracles.rel_err(ad.adaptive_avg_pool1d(Tensor(x), n).data, oracles.adaptive_avg_pool1d(x, n)) < 1e-12


def test_adaptive_spans_cover_input():
    for L in range(1, 30):
        for n in range(1, L + 1):
            spans = ad.adaptive_spans(L, n)
            assert spans[0][0] == 0 and spans[-1][1] == L
            assert all(lo < hi for lo, hi in spans)


def test_unpool_scatters_gradient_back_to_argmax_only():
    x = Tensor(np.array([[[1.0, 5.0, 2.0, 0.0, 7.0]]]), requires_grad=True)
    vals, idx = ad.maxpool1d(x, 2)
    (ad.maxunpool1d(vals, idx) * Tensor(np.arange(1.0, 6.0)[None, None])).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[0.0, 2.0, 3.0, 0.0, 5.0]]])


# ---------------------------------------------------------------- finite differences

@pytest.mark.parametrize("name", ["conv1d", "conv_transpose1d", "maxpool1d", "maxunpool1d",
                                  "adaptive_avg_pool1d", "dropout", "log_softmax", "grad_reverse"])
def test_registered_op_passes_gradcheck(name):
    from osaa.gradchecks import REGISTRY
    for seed in range(3):
        rep = REGISTRY[name].run(seed)
        assert rep.passed, rep.summary()


def test_gradcheck_reports_kinks_instead_of_failing():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    rep = gradcheck(lambda x: ad.relu(x).sum(), x)
    assert rep.passed
    assert rep.near_kink == [(0, 0)]


def test_gradcheck_catches_a_wrong_backward():
    from osaa.gradchecks import NEGATIVE_CONTROL
    rep = NEGATIVE_CONTROL.run(0)
    assert not rep.passed
    assert "broken_sigmoid" in rep.summary()
