import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from socprob.errors import DimensionError, NumericError
from socprob.tensor_core import (AdamState, adam_step, clip_by_global_norm, conv2d, conv2d_backward,
                                 finite_diff_grad, global_norm, hadamard, relative_error, sigmoid, tanh)


def conv_reference(x, k, b, pad):
    """scipy cross-correlation summed over input channels."""
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.stack([sum(correlate(xp[c], k[o, c], mode="valid") for c in range(x.shape[0]))
                    for o in range(k.shape[0])])
    return out + b[:, None, None]


def test_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 7))
    np.testing.assert_array_equal(conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


def test_zero_kernel_gives_bias(rng):
    x = rng.normal(size=(2, 4, 4))
    out = conv2d(x, np.zeros((3, 2, 3, 3)), np.array([1.5, -2.0, 0.0]), pad=1)
    assert out.shape == (3, 4, 4)
    np.testing.assert_array_equal(out[0], 1.5)
    np.testing.assert_array_equal(out[1], -2.0)


def test_center_sum_is_45():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 3, 3)
    out = conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1), pad=1)
    assert out[0, 1, 1] == 45.0
    assert out[0, 0, 0] == 1 + 2 + 4 + 5


@pytest.mark.parametrize("pad,k", [(0, 1), (0, 3), (1, 3), (2, 5), (1, 5)])
def test_conv_matches_scipy(rng, pad, k):
    x = rng.normal(size=(3, 8, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = conv2d(x, w, b, pad)
    assert out.shape == (4, 8 - k + 1 + 2 * pad, 6 - k + 1 + 2 * pad)
    np.testing.assert_allclose(out, conv_reference(x, w, b, pad), atol=1e-12)


def test_conv_batched_equals_loop(rng):
    x = rng.normal(size=(3, 2, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3))
    batched = conv2d(x, w, None, 1)
    for n in range(3):
        np.testing.assert_allclose(batched[n], conv2d(x[n], w, None, 1), atol=1e-13)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_backward_matches_finite_differences(rng):
    x = rng.normal(size=(2, 2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(2, 3, 5, 4))
    dx, dw, db = conv2d_backward(g, x, w, pad=1)
    loss = lambda x_, w_, b_: float(np.sum(conv2d(x_, w_, b_, 1) * g))
    assert relative_error(dx, finite_diff_grad(lambda a: loss(a, w, b), x)) < 1e-7
    assert relative_error(dw, finite_diff_grad(lambda a: loss(x, a, b), w)) < 1e-7
    assert relative_error(db, finite_diff_grad(lambda a: loss(x, w, a), b)) < 1e-7


def test_nonlinearities_at_zero():
    assert sigmoid(np.array(0.0)) == 0.5
    assert tanh(np.array(0.0)) == 0.0


@given(st.lists(st.floats(-700, 700), min_size=1, max_size=20))
def test_sigmoid_range_and_symmetry(vals):
    x = np.array(vals)
    s = sigmoid(x)
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-15)
    # strictly inside (0, 1) wherever float64 can represent it
    mid = np.abs(x) < 30
    assert np.all((s[mid] > 0) & (s[mid] < 1))


def test_hadamard(rng):
    a = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(hadamard(a, np.ones_like(a)), a)
    with pytest.raises(DimensionError):
        hadamard(a, np.ones((3, 2)))


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, -0.1, 0.0])
    st_ = AdamState.zeros_like(p)
    new, st2 = adam_step(p, g, st_, lr=0.01)
    # bias-corrected first step is lr * sign(g) (up to eps)
    np.testing.assert_allclose(new - p, [-0.01, 0.01, 0.0], atol=1e-9)
    assert st2.step_count == 1
    assert np.all(st2.second_moment >= 0)


def test_adam_matches_reference_over_steps(rng):
    p = rng.normal(size=4)
    st_ = AdamState.zeros_like(p)
    m = v = np.zeros(4)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        p, st_ = adam_step(p, g, st_, lr=1e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert st_.step_count == t
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adam_rejects_nonfinite():
    p = np.zeros(2)
    with pytest.raises(NumericError):
        adam_step(p, np.array([np.nan, 0.0]), AdamState.zeros_like(p))


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert global_norm(clipped.values()) == pytest.approx(1.0)
    same, _ = clip_by_global_norm(grads, 10.0)
    np.testing.assert_array_equal(same["a"], grads["a"])


@settings(max_examples=25)
@given(st.integers(1, 4), st.integers(0, 1000))
def test_finite_diff_on_quadratic(n, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(n, n))
    x = r.normal(size=n)
    grad = finite_diff_grad(lambda z: float(z @ a @ z), x)
    np.testing.assert_allclose(grad, (a + a.T) @ x, atol=1e-6)
