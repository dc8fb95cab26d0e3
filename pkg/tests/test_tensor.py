"""Kernel-level tests: each op against a brute-force oracle plus edge cases."""

import numpy as np
import pytest

from sadnet import tensor as T
from sadnet.errors import ShapeError


def matmul_oracle(a, b):
    """Naive triple loop, independent of any numpy matmul path."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv2d_oracle(x, kernels, bias, pad):
    """Four nested loops over output channel, position, and kernel taps."""
    c, h, w = x.shape
    o, _, kh, kw = kernels.shape
    oh, ow = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for y in range(oh):
            for xpos in range(ow):
                acc = bias[oc]
                for ic in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            yy, xx = y + i - pad, xpos + j - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += x[ic, yy, xx] * kernels[oc, ic, i, j]
                out[oc, y, xpos] = acc
    return out


def maxpool_oracle(x, window):
    c, h, w = x.shape
    out = np.zeros((c, h // window, w // window))
    for ch in range(c):
        for y in range(h // window):
            for xpos in range(w // window):
                out[ch, y, xpos] = x[ch, y * window:(y + 1) * window,
                                     xpos * window:(xpos + 1) * window].max()
    return out


class TestMatmul:
    def test_identity(self):
        b = T.tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), b), b)

    def test_two_by_two(self):
        # frozen from matmul_oracle([[1,2],[3,4]], [[5,6],[7,8]])
        out = T.matmul(T.tensor([[1, 2], [3, 4]]), T.tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out, [[19.0, 22.0], [43.0, 50.0]])

    def test_zero_annihilation(self):
        rng = np.random.default_rng(0)
        out = T.matmul(T.zeros((3, 4)), rng.normal(size=(4, 2)))
        np.testing.assert_array_equal(out, np.zeros((3, 2)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.zeros((2, 3)), T.zeros((2, 2)))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            a = rng.uniform(-1, 1, size=(8, 8))
            b = rng.uniform(-1, 1, size=(8, 8))
            got = T.matmul(a, b)
            want = matmul_oracle(a, b)
            rel = np.linalg.norm(got - want) / np.linalg.norm(want)
            assert rel < 1e-13


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(1, 5, 5))
        kernels = np.ones((1, 1, 1, 1))
        out = T.conv2d(x, kernels, T.zeros(1), pad=0)
        np.testing.assert_allclose(out, x)

    def test_bias_only_on_zero_input(self):
        bias = T.tensor([1.5, -2.0])
        out = T.conv2d(T.zeros((1, 4, 4)), T.zeros((2, 1, 3, 3)), bias, pad=1)
        assert out.shape == (2, 4, 4)
        np.testing.assert_allclose(out[0], 1.5)
        np.testing.assert_allclose(out[1], -2.0)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 4))
        kernels = rng.normal(size=(1, 1, 3, 3))
        bias = rng.normal(size=1)
        out = T.conv2d(x, kernels, bias, pad=0)
        assert out.shape == (1, 2, 2)
        np.testing.assert_allclose(out, conv2d_oracle(x, kernels, bias, 0), atol=1e-12)

    @pytest.mark.parametrize("pad", [0, 1, 2])
    def test_oracle_multichannel_padded(self, pad):
        rng = np.random.default_rng(3 + pad)
        x = rng.normal(size=(2, 5, 6))
        kernels = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        np.testing.assert_allclose(T.conv2d(x, kernels, bias, pad),
                                   conv2d_oracle(x, kernels, bias, pad), atol=1e-12)

    def test_one_hot_kernel_selects_channel(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 4, 4))
        kernels = T.zeros((1, 3, 1, 1))
        kernels[0, 2, 0, 0] = 1.0
        out = T.conv2d(x, kernels, T.zeros(1), pad=0)
        np.testing.assert_array_equal(out[0], x[2])

    def test_non_positive_output_extent(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.zeros((1, 2, 2)), T.zeros((1, 1, 5, 5)), T.zeros(1), pad=0)

    def test_backward_routes_to_padded_taps(self):
        # finite-difference spot check on a single kernel tap
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 1, 4, 4))
        kernels = rng.normal(size=(2, 1, 3, 3))
        bias = rng.normal(size=2)
        dout = rng.normal(size=(1, 2, 4, 4))
        _, dk, db = T.conv2d_backward_batch(x, kernels, 1, dout)
        h = 1e-6
        for tap in [(0, 0, 0, 0), (1, 0, 2, 1)]:
            kp = kernels.copy()
            kp[tap] += h
            km = kernels.copy()
            km[tap] -= h
            up = (T.conv2d_batch(x, kp, bias, 1) * dout).sum()
            down = (T.conv2d_batch(x, km, bias, 1) * dout).sum()
            np.testing.assert_allclose(dk[tap], (up - down) / (2 * h), rtol=1e-5)
        np.testing.assert_allclose(db, dout.sum(axis=(0, 2, 3)))


class TestMaxPool:
    def test_single_window(self):
        out, idx = T.maxpool2d(T.tensor([[[1, 2], [3, 4]]]))
        np.testing.assert_array_equal(out, [[[4.0]]])
        assert idx[0, 0, 0] == 3  # row-major position (1, 1) inside the window

    def test_constant_invariance(self):
        out, _ = T.maxpool2d(np.full((2, 4, 4), 7.0))
        np.testing.assert_array_equal(out, np.full((2, 2, 2), 7.0))

    def test_matches_window_scan_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 4, 4))
        out, _ = T.maxpool2d(x)
        np.testing.assert_array_equal(out, maxpool_oracle(x, 2))

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            T.maxpool2d(T.zeros((1, 3, 4)))

    def test_output_members_of_windows(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 6, 8))
        out, _ = T.maxpool2d(x)
        for c in range(3):
            for y in range(3):
                for xx in range(4):
                    window = x[c, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2]
                    assert out[c, y, xx] in window

    def test_backward_scatters_to_argmax(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out, idx = T.maxpool2d_batch(x, 2)
        dout = np.array([[[[5.0]]]])
        dx = T.maxpool2d_backward_batch(idx, dout, 2, x.shape)
        np.testing.assert_array_equal(dx, [[[[0.0, 0.0], [0.0, 5.0]]]])


class TestReluSoftmaxNormAxpy:
    def test_relu_examples(self):
        np.testing.assert_array_equal(T.relu(T.tensor([-1, 0, 2])), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.relu(T.tensor([-3, -1])), [0.0, 0.0])

    def test_relu_backward_gate(self):
        np.testing.assert_array_equal(T.relu_backward(T.tensor([5.0]), T.tensor([3.0])), [5.0])
        np.testing.assert_array_equal(T.relu_backward(T.tensor([5.0]), T.tensor([-3.0])), [0.0])
        np.testing.assert_array_equal(T.relu_backward(T.tensor([5.0]), T.tensor([0.0])), [0.0])

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(T.zeros(10)), np.full(10, 0.1), atol=1e-15)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=7)
        np.testing.assert_allclose(T.softmax(z), T.softmax(z + 123.456), atol=1e-12)

    def test_softmax_frozen_values(self):
        # frozen from the direct exponential-sum oracle on [1, 2, 3]
        np.testing.assert_allclose(T.softmax(T.tensor([1.0, 2.0, 3.0])),
                                   [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_softmax_is_probability_vector(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            z = rng.normal(0, 10, size=rng.integers(2, 12))
            p = T.softmax(z)
            assert (p >= 0).all()
            assert abs(p.sum() - 1.0) < 1e-12

    def test_softmax_large_logits_stable(self):
        p = T.softmax(T.tensor([1000.0, 0.0]))
        assert np.isfinite(p).all()
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-12)

    def test_norm2(self):
        assert T.norm2(T.tensor([3.0, 4.0])) == pytest.approx(5.0)
        assert T.norm2(T.zeros((4, 4))) == 0.0

    def test_axpy(self):
        np.testing.assert_array_equal(T.axpy(2.0, T.tensor([1, 1]), T.tensor([0, 1])), [2.0, 3.0])
        with pytest.raises(ShapeError):
            T.axpy(1.0, T.zeros(3), T.zeros(4))
