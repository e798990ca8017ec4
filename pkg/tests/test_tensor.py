import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegpe import kernels
from eegpe import tensor as T
from eegpe.errors import ConfigError, ContractError, DimensionError, NumericError
from eegpe.gradcheck import OP_TOL, check_op, op_cases
from eegpe.tensor import Tensor, grad_check, grad_check_many


def brute_depthwise(x, k):
    """Sliding-window cross-correlation with zero padding, written as plain loops."""
    B, D, H, W = x.shape
    _, kh, kw = k.shape
    out = np.zeros_like(x)
    for b in range(B):
        for d in range(D):
            for h in range(H):
                for w in range(W):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            hh, ww = h + i - kh // 2, w + j - kw // 2
                            if 0 <= hh < H and 0 <= ww < W:
                                acc += x[b, d, hh, ww] * k[d, i, j]
                    out[b, d, h, w] = acc
    return out


def brute_conv1d(x, w, stride, pad):
    N, Cin, L = x.shape
    Cout, _, K = w.shape
    Lout = (L + 2 * pad - K) // stride + 1
    out = np.zeros((N, Cout, Lout))
    for n in range(N):
        for o in range(Cout):
            for l in range(Lout):
                for c in range(Cin):
                    for k in range(K):
                        s = l * stride + k - pad
                        if 0 <= s < L:
                            out[n, o, l] += x[n, c, s] * w[o, c, k]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2], [3, 4]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), a).data, a)

    def test_zero(self):
        out = T.matmul([[1.0, 2], [3, 4]], np.zeros((2, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_arithmetic(self):
        out = T.matmul([[1.0, 2], [3, 4]], [[5.0, 6], [7, 8]])
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_logs(self):
        out = T.softmax(np.log([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(T.softmax(x).data, T.softmax(x + 7.5).data, rtol=1e-14)

    def test_large_inputs_are_stable(self):
        out = T.softmax([1000.0, 1000.0]).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    @given(arrays(np.float64, (3, 5), elements=st.floats(-10, 10)))
    @settings(max_examples=50, deadline=None)
    def test_slices_sum_to_one(self, x):
        out = T.softmax(x, axis=-1).data
        assert np.all(out > 0) and np.all(out < 1)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4), 1e-5).data
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_plus_minus_one(self):
        out = T.layer_norm([1.0, -1.0], np.ones(2), np.zeros(2), 1e-12).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-11)

    def test_zero_gain(self):
        b = np.array([0.5, -2.0, 3.0])
        out = T.layer_norm(np.random.default_rng(0).normal(size=(4, 3)), np.zeros(3), b).data
        np.testing.assert_array_equal(out, np.broadcast_to(b, (4, 3)))

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            T.layer_norm([1.0, 2.0], np.ones(2), np.zeros(2), 0.0)


class TestDepthwiseConv:
    def test_zero_input(self):
        k = np.random.default_rng(0).normal(size=(3, 5, 3))
        out = T.depthwise_conv2d(np.zeros((2, 3, 6, 4)), k).data
        np.testing.assert_array_equal(out, 0.0)

    def test_scaling_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
        out = T.depthwise_conv2d(x, np.full((3, 1, 1), 2.0)).data
        np.testing.assert_array_equal(out, 2 * x)

    def test_impulse_stamps_kernel(self):
        # cross-correlation: an impulse at (r, c) leaves the kernel flipped around it
        k = np.arange(9, dtype=float).reshape(1, 3, 3) + 1
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        out = T.depthwise_conv2d(x, k).data
        np.testing.assert_array_equal(out[0, 0, 1:4, 1:4], k[0, ::-1, ::-1])
        np.testing.assert_array_equal(out, brute_depthwise(x, k))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        x, k = rng.normal(size=(2, 3, 6, 4)), rng.normal(size=(3, 5, 3))
        np.testing.assert_allclose(T.depthwise_conv2d(x, k).data, brute_depthwise(x, k), atol=1e-12)

    def test_channels_do_not_mix(self):
        rng = np.random.default_rng(3)
        x = np.zeros((1, 3, 5, 5))
        x[0, 1] = rng.normal(size=(5, 5))
        out = T.depthwise_conv2d(x, rng.normal(size=(3, 3, 3))).data
        assert np.all(out[0, 0] == 0) and np.all(out[0, 2] == 0)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.depthwise_conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 2, 3)))

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(-1, 1, (2, 2, 5, 4)), rng.uniform(-1, 1, (2, 2, 5, 4))
        k = rng.uniform(-1, 1, (2, 3, 3))
        f = lambda v: T.depthwise_conv2d(v, k).data
        np.testing.assert_allclose(f(a * x + b * y), a * f(x) + b * f(y), rtol=0, atol=1e-12)


class TestRdft:
    def test_constant(self):
        out = T.rdft_magnitude(np.full(8, 1.5))
        np.testing.assert_allclose(out, [12.0, 0, 0, 0, 0], atol=1e-12)

    def test_cosine_bin(self):
        n = np.arange(16)
        out = T.rdft_magnitude(np.cos(2 * np.pi * 3 * n / 16))
        assert np.argmax(out) == 3
        np.testing.assert_allclose(out[3], 8.0, atol=1e-12)
        np.testing.assert_allclose(np.delete(out, 3), 0.0, atol=1e-12)

    def test_zero(self):
        np.testing.assert_array_equal(T.rdft_magnitude(np.zeros(10)), np.zeros(6))

    def test_matches_fft(self):
        x = np.random.default_rng(0).normal(size=(5, 40))
        np.testing.assert_allclose(T.rdft_magnitude(x), np.abs(np.fft.rfft(x, axis=-1)), atol=1e-11)

    def test_odd_length_rejected(self):
        with pytest.raises(ConfigError):
            T.rdft_magnitude(np.zeros(7))

    def test_not_on_tape(self):
        x = T.parameter(np.ones((2, 8)))
        assert not T.rdft_magnitude(x).requires_grad


# ------------------------------------------------------------------ gradient suite

@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradient_matches_finite_differences(name):
    assert check_op(name) < OP_TOL


def test_grad_check_square():
    assert grad_check(lambda x: T.tsum(T.square(x)), Tensor([3.0])) < 1e-6


def test_grad_check_mse_linear():
    rng = np.random.default_rng(0)
    W, b, y = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=(4, 4))
    err = grad_check(lambda x: T.mse(T.linear(x, W, b), y), Tensor(rng.normal(size=(4, 4))))
    assert err < 1e-4


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ContractError):
        grad_check(lambda x: T.square(x), Tensor([1.0, 2.0]))


def test_grad_check_rejects_bad_step():
    with pytest.raises(ConfigError):
        grad_check(lambda x: T.tsum(x), Tensor([1.0]), h=0)


# ------------------------------------------------------------------ tape

def test_tape_linearity():
    rng = np.random.default_rng(5)
    x = T.parameter(rng.normal(size=(3, 3)))
    W = rng.normal(size=(3, 3))

    def l1():
        return T.tsum(T.gelu(T.linear(x, W)))

    def l2():
        return T.mse(T.softmax(x), np.eye(3))

    (l1() + l2()).backward()
    joint = x.grad.copy()
    x.grad = None
    l1().backward()
    l2().backward()
    np.testing.assert_allclose(joint, x.grad, rtol=1e-13, atol=1e-15)


def test_tape_visits_each_op_once():
    calls = []
    x = T.parameter([2.0])
    a = T.square(x)
    b = a * 3.0
    c = a + b  # diamond: a feeds two consumers
    loss = T.tsum(c)
    order = T.tape(loss)
    assert len(order) == len({id(t) for t in order}) == 4
    seqs = [t._node.seq for t in order]
    assert seqs == sorted(seqs, reverse=True)
    loss.backward()
    # d/dx (x^2 + 3x^2) = 8x
    np.testing.assert_allclose(x.grad, [16.0])


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.square(T.parameter([1.0, 2.0])).backward()


def test_no_grad_records_nothing():
    x = T.parameter([1.0])
    with T.no_grad():
        y = T.square(x)
    assert y.is_leaf and not y.requires_grad


def test_grad_shapes_match_data():
    x = T.parameter(np.ones((2, 3)))
    b = T.parameter(np.ones(3))
    T.tsum(x * b).backward()
    assert x.grad.shape == x.shape and b.grad.shape == b.shape


def test_non_finite_detected():
    with np.errstate(invalid="ignore"):
        bad = T.log(Tensor([-1.0]))
    with pytest.raises(NumericError):
        bad.check_finite()


# ------------------------------------------------------------------ kernel backends

@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
class TestBackendsAgree:
    def _both(self, fn):
        with kernels.use_backend("python"):
            ref = fn()
        with kernels.use_backend("cython"):
            fast = fn()
        return ref, fast

    def test_dwconv(self):
        rng = np.random.default_rng(0)
        x, k, g = rng.normal(size=(2, 4, 8, 4)), rng.normal(size=(4, 7, 3)), rng.normal(size=(2, 4, 8, 4))
        ref, fast = self._both(lambda: (kernels.dwconv2d_forward(x, k), *kernels.dwconv2d_backward(x, k, g)))
        for a, b in zip(ref, fast):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_conv1d(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(5, 3, 40)), rng.normal(size=(8, 3, 7))
        g = rng.normal(size=(5, 8, 20))
        ref, fast = self._both(lambda: (kernels.conv1d_forward(x, w, 2, 3), *kernels.conv1d_backward(x, w, g, 2, 3)))
        for a, b in zip(ref, fast):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(ref[0], brute_conv1d(x, w, 2, 3), atol=1e-12)

    def test_dft(self):
        x = np.random.default_rng(2).normal(size=(6, 40))
        ref = kernels.dft_magnitude(x)
        np.testing.assert_allclose(ref, np.abs(np.fft.rfft(x, axis=-1)), atol=1e-11)
        for name in kernels.available_backends():
            fast = kernels._BACKENDS[name].dft_magnitude(x)
            np.testing.assert_allclose(ref, fast, rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_conv_gradients_per_backend(backend):
    rng = np.random.default_rng(7)
    with kernels.use_backend(backend):
        x, k = T.parameter(rng.uniform(-1, 1, (1, 2, 5, 3))), T.parameter(rng.uniform(-1, 1, (2, 3, 3)))
        R = rng.uniform(-1, 1, (1, 2, 5, 3))
        errs = grad_check_many(lambda: T.tsum(T.depthwise_conv2d(x, k) * R), [x, k])
        assert max(errs.values()) < 1e-4
