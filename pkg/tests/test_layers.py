import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selftransfer import layers as L
from selftransfer.errors import ConfigError, InputError
from selftransfer.rng import Rng

from oracles import conv2d_loops, maxpool_scan, numeric_grad, rel_err


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


# -- conv2d ---------------------------------------------------------------

def test_conv_sum_of_ones():
    out = L.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = rand((2, 1, 5, 4))
    out = L.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_matches_loops_single_precision():
    x = rand((2, 3, 7, 7), 1, np.float32)
    w = rand((4, 3, 3, 3), 2, np.float32)
    b = rand((4,), 3, np.float32)
    out = L.conv2d_forward(x, w, b, stride=2, pad=1)
    ref = conv2d_loops(x, w, b, 2, 1)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out, ref, atol=1e-6 * max(1.0, np.abs(ref).max()))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 9), w=st.integers(1, 9),
       oc=st.integers(1, 3), k=st.integers(1, 3), s=st.integers(1, 3), p=st.integers(0, 2),
       seed=st.integers(0, 2**16))
def test_conv_matches_loops_double(n, c, h, w, oc, k, s, p, seed):
    if (h + 2 * p - k) // s + 1 < 1 or (w + 2 * p - k) // s + 1 < 1:
        return
    x, wt, b = rand((n, c, h, w), seed), rand((oc, c, k, k), seed + 1), rand((oc,), seed + 2)
    out = L.conv2d_forward(x, wt, b, s, p)
    np.testing.assert_allclose(out, conv2d_loops(x, wt, b, s, p), rtol=0, atol=1e-12)


def test_conv_errors_name_layer():
    with pytest.raises(ConfigError, match="conv3"):
        L.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1), name="conv3")
    with pytest.raises(ConfigError, match="output"):
        L.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_conv_backward_zero_and_identity():
    x = rand((2, 3, 5, 5))
    w = rand((4, 3, 3, 3), 1)
    gx, gw, gb = L.conv2d_backward(x, w, np.zeros((2, 4, 5, 5)), 1, 1)
    assert not gx.any() and not gw.any() and not gb.any()
    g = rand((2, 1, 5, 5), 2)
    gx, _, _ = L.conv2d_backward(x[:, :1], np.ones((1, 1, 1, 1)), g)
    np.testing.assert_array_equal(gx, g)


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0)])
def test_conv_backward_finite_differences(k, s, p):
    x = rand((2, 2, 5, 6), 3)
    w = rand((3, 2, k, k), 4)
    b = rand((3,), 5)
    y = L.conv2d_forward(x, w, b, s, p)
    g = rand(y.shape, 6)
    loss = lambda: float((L.conv2d_forward(x, w, b, s, p) * g).sum())  # noqa: E731
    gx, gw, gb = L.conv2d_backward(x, w, g, s, p)
    assert rel_err(gx, numeric_grad(loss, x)) < 1e-6
    assert rel_err(gw, numeric_grad(loss, w)) < 1e-6
    assert rel_err(gb, numeric_grad(loss, b)) < 1e-6


# -- relu -----------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(L.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(L.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 7.0])),
                                  [0, 7])


def test_relu_finite_differences_away_from_kink():
    x = rand((3, 4, 5, 5), 7)
    x[np.abs(x) < 1e-3] = 0.5
    g = rand(x.shape, 8)
    num = numeric_grad(lambda: float((L.relu_forward(x) * g).sum()), x)
    assert rel_err(L.relu_backward(x, g), num) < 1e-6


# -- max pooling ----------------------------------------------------------

def test_maxpool_examples():
    out, arg = L.maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 0.0]]]]), 2, 2)
    assert out[0, 0, 0, 0] == 3 and divmod(int(arg[0, 0, 0, 0]), 2) == (1, 0)
    out, arg = L.maxpool_forward(np.full((1, 1, 2, 2), 4.0), 2, 2)
    assert out[0, 0, 0, 0] == 4 and arg[0, 0, 0, 0] == 0


@pytest.mark.parametrize("shape,k,s", [((1, 2, 6, 6), 2, 2), ((2, 3, 7, 9), 3, 2), ((1, 1, 5, 5), 2, 1)])
def test_maxpool_matches_scan(shape, k, s):
    x = rand(shape, 9)
    out, arg = L.maxpool_forward(x, k, s)
    ref, ref_arg = maxpool_scan(x, k, s)
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_array_equal(arg, ref_arg)
    g = rand(out.shape, 10)
    dx = L.maxpool_backward(g, arg, x.shape, k, s)
    expected = np.zeros_like(x)
    for idx in np.ndindex(*out.shape):
        a, b, i, j = idx
        di, dj = divmod(int(ref_arg[idx]), k)
        expected[a, b, i * s + di, j * s + dj] += g[idx]
    np.testing.assert_allclose(dx, expected, rtol=0, atol=1e-15)


def test_maxpool_ties_use_first_index():
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 1, 1] = x[0, 0, 1, 0] = 2.0
    _, arg = L.maxpool_forward(x, 2, 2)
    assert arg[0, 0, 0, 0] == 2


# -- fully connected ------------------------------------------------------

def test_fc_identity_and_bias():
    x = rand((3, 4, 1, 1))
    out = L.fully_connected_forward(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(out, x)
    b = rand((5,), 2)
    out = L.fully_connected_forward(np.zeros((2, 3, 2, 2)), rand((5, 12)), b)
    np.testing.assert_array_equal(out[:, :, 0, 0], np.tile(b, (2, 1)))


def test_fc_finite_differences():
    x, w, b = rand((3, 2, 2, 2), 1), rand((4, 8), 2), rand((4,), 3)
    g = rand((3, 4, 1, 1), 4)
    loss = lambda: float((L.fully_connected_forward(x, w, b) * g).sum())  # noqa: E731
    gx, gw, gb = L.fully_connected_backward(x, w, g)
    for analytic, var in ((gx, x), (gw, w), (gb, b)):
        assert rel_err(analytic, numeric_grad(loss, var)) < 1e-6


def test_fc_dimension_mismatch():
    with pytest.raises(ConfigError):
        L.fully_connected_forward(np.zeros((1, 3)), np.zeros((2, 4)), np.zeros(2))


# -- dropout --------------------------------------------------------------

def test_dropout_identity_cases():
    x = rand((4, 5, 1, 1))
    out, _ = L.dropout_forward(x, 0.0, Rng(1), True)
    np.testing.assert_array_equal(out, x)
    out, _ = L.dropout_forward(x, 0.7, Rng(1), False)
    np.testing.assert_array_equal(out, x)
    with pytest.raises(ConfigError):
        L.dropout_forward(x, 1.0, Rng(1), True)


def test_dropout_statistics():
    x = np.abs(rand((100_000,), 11)) + 0.5
    out, mask = L.dropout_forward(x, 0.5, Rng(2024), True)
    survivors = np.mean(out != 0)
    assert abs(survivors - 0.5) < 0.01
    assert abs(out.mean() - x.mean()) < 0.01 * x.mean()
    np.testing.assert_array_equal(L.dropout_backward(np.ones_like(x), mask), mask)


# -- 1x1 conv and global pools -------------------------------------------

def test_conv1x1_examples():
    x = rand((2, 3, 4, 4))
    w = np.zeros((1, 3, 1, 1))
    w[0, 1] = 1.0
    np.testing.assert_array_equal(L.conv1x1_forward(x, w, np.zeros(1))[:, 0], x[:, 1])
    out = L.conv1x1_forward(x, np.zeros((2, 3, 1, 1)), np.array([0.25, -1.5]))
    assert np.all(out[:, 0] == 0.25) and np.all(out[:, 1] == -1.5)


def test_conv1x1_matches_loops_and_gradients():
    x, w, b = rand((2, 4, 9, 9), 1), rand((3, 4, 1, 1), 2), rand((3,), 3)
    np.testing.assert_allclose(L.conv1x1_forward(x, w, b), conv2d_loops(x, w, b, 1, 0),
                               rtol=0, atol=1e-12)
    xs, g = x[:, :, :3, :3].copy(), rand((2, 3, 3, 3), 4)
    loss = lambda: float((L.conv1x1_forward(xs, w, b) * g).sum())  # noqa: E731
    gx, gw, gb = L.conv1x1_backward(xs, w, g)
    for analytic, var in ((gx, xs), (gw, w), (gb, b)):
        assert rel_err(analytic, numeric_grad(loss, var)) < 1e-6


def test_global_max_pool_examples():
    m = np.array([[[[1.0, 5.0], [2.0, 3.0]]]])
    out, arg = L.global_max_pool_forward(m)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 5
    dx = L.global_max_pool_backward(np.array([[[[2.5]]]]), arg, m.shape)
    np.testing.assert_array_equal(dx[0, 0], [[0, 2.5], [0, 0]])
    _, arg = L.global_max_pool_forward(np.full((1, 1, 3, 3), 7.0))
    assert arg[0, 0] == 0


def test_global_max_pool_scan_oracle():
    x = rand((3, 2, 5, 4), 12)
    out, arg = L.global_max_pool_forward(x)
    g = rand((3, 2, 1, 1), 13)
    dx = L.global_max_pool_backward(g, arg, x.shape)
    for a in range(3):
        for k in range(2):
            flat = x[a, k].reshape(-1)
            best = max(range(flat.size), key=lambda i: (flat[i], -i))
            assert out[a, k, 0, 0] == flat[best]
            assert np.count_nonzero(dx[a, k]) == 1
            assert dx[a, k].reshape(-1)[best] == g[a, k, 0, 0]


def test_global_avg_pool_examples():
    m = np.array([[[[1.0, 5.0], [2.0, 4.0]]]])
    assert L.global_avg_pool_forward(m)[0, 0, 0, 0] == 3.0
    np.testing.assert_array_equal(L.global_avg_pool_backward(np.array([[[[4.0]]]]), m.shape),
                                  np.ones((1, 1, 2, 2)))
    x = rand((2, 3, 6, 5), 14)
    means = np.array([[sum(x[a, k].reshape(-1).tolist()) / 30 for k in range(3)] for a in range(2)])
    np.testing.assert_allclose(L.global_avg_pool_forward(x)[:, :, 0, 0], means, atol=1e-6)


def test_global_pool_backward_structure():
    x = rand((4, 2, 6, 6), 15)
    g = rand((4, 2, 1, 1), 16)
    _, arg = L.global_max_pool_forward(x)
    dmax = L.global_max_pool_backward(g, arg, x.shape)
    assert np.all(np.count_nonzero(dmax.reshape(4, 2, -1), axis=-1) <= 1)
    davg = L.global_avg_pool_backward(g, x.shape)
    assert np.all(davg == davg[:, :, :1, :1])
    np.testing.assert_allclose(davg.sum(axis=(2, 3)), g[:, :, 0, 0], atol=1e-15)


# -- softmax cross-entropy ------------------------------------------------

def test_softmax_ce_symmetric():
    loss, probs, _ = L.softmax_cross_entropy(np.zeros((3, 2, 1, 1)), L.one_hot([0, 1, 1], 2))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(probs, 0.5)


def test_softmax_ce_gradient_identity():
    logits = rand((5, 3, 1, 1), 17)
    t = L.one_hot([0, 2, 1, 1, 0], 3)
    _, probs, grad = L.softmax_cross_entropy(logits, t)
    np.testing.assert_array_equal(grad.reshape(5, 3), (probs - t) / 5)


def test_softmax_ce_direct_value():
    loss, _, _ = L.softmax_cross_entropy(np.array([[3.0, 1.0]]), L.one_hot([0], 2))
    assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.1269, abs=1e-4)


def test_softmax_ce_rejects_bad_targets():
    with pytest.raises(InputError):
        L.softmax_cross_entropy(np.zeros((1, 2)), np.array([[0.5, 0.5]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.integers(0, 5))
def test_softmax_properties(logits, cls):
    z = np.array([logits])
    cls = cls % len(logits)
    loss, probs, _ = L.softmax_cross_entropy(z, L.one_hot([cls], len(logits)))
    assert abs(probs.sum() - 1) < 1e-6
    assert loss >= 0


# -- purity ---------------------------------------------------------------

def test_forward_backward_bit_identical():
    x = rand((2, 3, 8, 8), 18, np.float32)
    w = rand((4, 3, 3, 3), 19, np.float32)
    b = rand((4,), 20, np.float32)
    a = L.conv2d_forward(x, w, b, 1, 1)
    assert a.tobytes() == L.conv2d_forward(x, w, b, 1, 1).tobytes()
    g = rand(a.shape, 21, np.float32)
    r1 = L.conv2d_backward(x, w, g, 1, 1)
    r2 = L.conv2d_backward(x, w, g, 1, 1)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(r1, r2))
    m1, _ = L.dropout_forward(x, 0.3, Rng(5), True)
    m2, _ = L.dropout_forward(x, 0.3, Rng(5), True)
    assert m1.tobytes() == m2.tobytes()
