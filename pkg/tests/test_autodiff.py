"""Reverse-mode engine tests: every op against a central finite-difference
oracle, the gradient-reversal contract, soft-argmax decoding, accumulation
semantics, and the Adam update."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdapose import autodiff as ad
from sdapose.autodiff import NumericsError, ShapeError, Tensor


def fd_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def assert_matches_fd(build, x0, rtol=1e-4, eps=1e-6):
    """build(Tensor) -> scalar Tensor; checks autodiff grad against FD."""
    x = Tensor(x0, requires_grad=True)
    ad.backward(build(x))
    num = fd_grad(lambda a: build(Tensor(a)).item(), x0, eps=eps)
    # floor the denominator at a fraction of the gradient's magnitude so
    # finite-difference truncation noise on near-zero entries cannot dominate
    scale = np.maximum(np.abs(num), 1e-3 * np.max(np.abs(num)) + 1e-12)
    assert np.max(np.abs(x.grad - num) / scale) < rtol


RNG = np.random.default_rng(12345)


# -- forward values -----------------------------------------------------------------


def test_relu_example():
    out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_uniform_logits():
    for k in (1, 3, 7):
        out = ad.softmax(Tensor(np.zeros(k)), axis=0)
        assert np.allclose(out.data, 1.0 / k, atol=1e-15)


def test_add_broadcasts_and_sub_mul():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.arange(3.0))
    assert np.array_equal(ad.add(a, b).data, 1.0 + np.arange(3.0) * np.ones((2, 3)))
    assert np.array_equal(ad.sub(a, a).data, np.zeros((2, 3)))
    assert np.array_equal(ad.mul(a, b).data, np.tile(np.arange(3.0), (2, 1)))


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_nonfinite_input_rejected():
    with pytest.raises(NumericsError):
        Tensor(np.array([1.0, np.inf]))
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(NumericsError):
        ad.log(x)


def test_max_pool_forward():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    out = ad.max_pool2d(x, 2)
    assert np.array_equal(out.data.reshape(2, 2), [[5.0, 7.0], [13.0, 15.0]])


def test_concat_forward():
    a, b = Tensor(np.ones((1, 2, 3, 3))), Tensor(np.zeros((1, 1, 3, 3)))
    out = ad.concat([a, b], axis=1)
    assert out.data.shape == (1, 3, 3, 3)
    assert np.array_equal(out.data[:, :2], a.data)


def test_upsample_matches_known_grid():
    # 2x2 -> 4x4 half-pixel-aligned bilinear; centers interpolate linearly
    x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2))
    out = ad.upsample_bilinear(x, 4, 4).data[0, 0]
    assert out[0, 0] == pytest.approx(0.0)
    assert out[3, 3] == pytest.approx(3.0)
    assert np.all(np.diff(out, axis=1) >= -1e-12)  # monotone along rows
    assert np.all(np.diff(out, axis=0) >= -1e-12)


# -- finite-difference oracle per op -------------------------------------------------


def test_fd_add_mul_sub():
    x0 = RNG.normal(size=(3, 4))
    c = Tensor(RNG.normal(size=(3, 4)))
    assert_matches_fd(lambda x: ad.sum_(ad.mul(ad.add(x, c), ad.sub(x, c))), x0)


def test_fd_broadcast_add():
    x0 = RNG.normal(size=(4,))
    c = Tensor(RNG.normal(size=(3, 4)))
    assert_matches_fd(lambda x: ad.sum_(ad.mul(ad.add(c, x), ad.add(c, x))), x0)


def test_fd_relu():
    x0 = RNG.normal(size=(5, 5)) + 0.05  # keep clear of the kink
    assert_matches_fd(lambda x: ad.sum_(ad.mul(ad.relu(x), ad.relu(x))), x0)


def test_fd_sigmoid_log_exp():
    x0 = RNG.normal(size=(6,)) * 0.5
    assert_matches_fd(lambda x: ad.sum_(ad.log(ad.add(ad.sigmoid(x), Tensor(np.ones(6))))), x0)
    assert_matches_fd(lambda x: ad.sum_(ad.exp(x)), x0)


def test_fd_matmul():
    x0 = RNG.normal(size=(3, 4))
    w = Tensor(RNG.normal(size=(4, 2)))
    assert_matches_fd(lambda x: ad.sum_(ad.mul(ad.matmul(x, w), ad.matmul(x, w))), x0)


def test_fd_softmax_mean():
    x0 = RNG.normal(size=(2, 5))
    t = Tensor(RNG.normal(size=(2, 5)))
    assert_matches_fd(lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=1), t)), x0)
    assert_matches_fd(lambda x: ad.mean(ad.mul(x, x)), x0)


def test_fd_conv2d_spec_example():
    # random 1x3x8x8 input, the documented oracle configuration
    x0 = RNG.normal(size=(1, 3, 8, 8))
    w = Tensor(RNG.normal(size=(2, 3, 3, 3)) * 0.5)
    assert_matches_fd(lambda x: ad.sum_(ad.mul(ad.conv2d(x, w, pad=1),
                                               ad.conv2d(x, w, pad=1))), x0, eps=1e-3)


def test_fd_conv2d_weights_and_stride():
    x = Tensor(RNG.normal(size=(2, 2, 6, 6)))
    w0 = RNG.normal(size=(3, 2, 3, 3)) * 0.5

    def build(w):
        y = ad.conv2d(x, w, stride=2, pad=1)
        return ad.sum_(ad.mul(y, y))

    w = Tensor(w0, requires_grad=True)
    ad.backward(build(w))
    num = fd_grad(lambda a: build(Tensor(a)).item(), w0)
    assert np.max(np.abs(w.grad - num) / np.maximum(np.abs(num), 1e-6)) < 1e-4


def test_fd_max_pool():
    x0 = RNG.normal(size=(1, 2, 6, 6))
    assert_matches_fd(lambda x: ad.sum_(ad.mul(ad.max_pool2d(x, 2),
                                               ad.max_pool2d(x, 2))), x0)


def test_fd_upsample_bilinear():
    x0 = RNG.normal(size=(1, 2, 4, 4))
    t = Tensor(RNG.normal(size=(1, 2, 8, 8)))
    assert_matches_fd(
        lambda x: ad.sum_(ad.mul(ad.upsample_bilinear(x, 8, 8), t)), x0)


def test_fd_concat():
    x0 = RNG.normal(size=(1, 2, 3, 3))
    other = Tensor(RNG.normal(size=(1, 1, 3, 3)))

    def build(x):
        y = ad.concat([x, other], axis=1)
        return ad.sum_(ad.mul(y, y))

    assert_matches_fd(build, x0)


def test_fd_soft_argmax():
    x0 = RNG.normal(size=(5, 7))

    def build(x):
        uv = ad.soft_argmax(x, beta=3.0)
        return ad.sum_(ad.mul(uv, uv))

    assert_matches_fd(build, x0)


# -- gradient reversal ---------------------------------------------------------------


def test_grl_forward_bitwise_identity():
    x = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    out = ad.grl(x, 0.7)
    assert np.array_equal(out.data, x.data)


def test_grl_sum_gives_minus_ones():
    x = Tensor(RNG.normal(size=(4,)), requires_grad=True)
    ad.backward(ad.sum_(ad.grl(x, 1.0)))
    assert np.array_equal(x.grad, -np.ones(4))


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_grl_scales_downstream_gradient(lam):
    x0 = RNG.normal(size=(3, 3))
    w = Tensor(RNG.normal(size=(3, 3)))

    def downstream(h):
        return ad.sum_(ad.sigmoid(ad.matmul(h, w)))

    plain = Tensor(x0, requires_grad=True)
    ad.backward(downstream(plain))
    reversed_ = Tensor(x0, requires_grad=True)
    ad.backward(downstream(ad.grl(reversed_, lam)))
    assert np.allclose(reversed_.grad, -lam * plain.grad, rtol=0, atol=1e-15)


# -- soft-argmax ----------------------------------------------------------------------


def test_soft_argmax_one_hot():
    hm = np.zeros((8, 8))
    hm[3, 5] = 1.0
    u, v = ad.soft_argmax(Tensor(hm), beta=500.0).data
    assert (u, v) == pytest.approx((5.0, 3.0))


def test_soft_argmax_uniform_gives_center():
    u, v = ad.soft_argmax(Tensor(np.zeros((5, 9))), beta=7.0).data
    assert (u, v) == pytest.approx((4.0, 2.0))


def test_soft_argmax_gaussian_subpixel():
    # wide bump so the sharpened softmax still spans several pixels
    yy, xx = np.mgrid[0:24, 0:24].astype(np.float64)
    cu, cv = 12.3, 11.6
    hm = np.exp(-((xx - cu) ** 2 + (yy - cv) ** 2) / (2 * 4.0 ** 2))
    u, v = ad.soft_argmax(Tensor(hm), beta=100.0).data
    assert abs(u - cu) < 0.1 and abs(v - cv) < 0.1
    # direct expectation oracle: must match the definition exactly
    p = np.exp(100.0 * (hm - hm.max()))
    p /= p.sum()
    assert u == pytest.approx((p * xx).sum(), abs=1e-9)
    assert v == pytest.approx((p * yy).sum(), abs=1e-9)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_soft_argmax_inside_bounds(h, w, seed):
    hm = np.random.default_rng(seed).normal(size=(h, w)) * 5
    u, v = ad.soft_argmax(Tensor(hm), beta=100.0).data
    assert 0.0 <= u <= w - 1 and 0.0 <= v <= h - 1


# -- backward semantics ---------------------------------------------------------------


def test_backward_half_sum_square():
    x0 = RNG.normal(size=(7,))
    x = Tensor(x0, requires_grad=True)
    ad.backward(ad.mul(ad.sum_(ad.mul(x, x)), Tensor(np.array(0.5))))
    assert np.allclose(x.grad, x0, atol=1e-12)


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_tensor_used_twice_sums_paths():
    x0 = RNG.normal(size=(4,))
    x = Tensor(x0, requires_grad=True)
    ad.backward(ad.add(ad.sum_(ad.mul(x, x)), ad.sum_(ad.exp(x))))
    # duplicated-input comparison: evaluate each path with its own leaf
    a = Tensor(x0, requires_grad=True)
    ad.backward(ad.sum_(ad.mul(a, a)))
    b = Tensor(x0, requires_grad=True)
    ad.backward(ad.sum_(ad.exp(b)))
    assert np.allclose(x.grad, a.grad + b.grad, atol=1e-12)


def test_backward_twice_doubles_grads():
    x = Tensor(RNG.normal(size=(3,)), requires_grad=True)
    loss = ad.sum_(ad.mul(x, x))
    ad.backward(loss)
    once = x.grad.copy()
    ad.backward(loss)
    assert np.allclose(x.grad, 2 * once, atol=1e-15)


# -- adam ------------------------------------------------------------------------------


def test_adam_moves_against_constant_gradient():
    p = Tensor(np.zeros(3), requires_grad=True)
    state = ad.adam_init([p])
    for _ in range(50):
        p.grad = np.full(3, 2.0)
        ad.adam_step([p], state, lr=1e-2)
    assert np.all(p.data < 0)


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([1.0, -3.0]), requires_grad=True)
    state = ad.adam_init([p])
    p.grad = np.array([0.5, -4.0])
    before = p.data.copy()
    ad.adam_step([p], state, lr=1e-3)
    # bias-corrected first step: |step| = lr * |g| / (|g| + eps') ~= lr
    assert np.allclose(np.abs(p.data - before), 1e-3, rtol=1e-3)


def test_adam_quadratic_bowl_decreases():
    p = Tensor(np.array([2.0, -1.5]), requires_grad=True)
    state = ad.adam_init([p])
    losses = []
    for _ in range(100):
        ad.zero_grads([p])
        loss = ad.sum_(ad.mul(p, p))
        ad.backward(loss)
        losses.append(loss.item())
        ad.adam_step([p], state, lr=1e-3)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_missing_grad_raises():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = ad.adam_init([p])
    with pytest.raises(ad.InvalidStateError):
        ad.adam_step([p], state, lr=1e-3)
