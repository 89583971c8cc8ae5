"""Tensor primitives: forward oracles and gradient checks."""

import numpy as np
import pytest

from fedmenu.tensor import (
    ConfigurationError,
    DimensionError,
    GradTape,
    NonFiniteError,
    Tensor,
    add,
    clamp,
    concat_channels,
    conv2d,
    grad_check,
    instance_norm,
    leaky_relu,
    maxpool2,
    merge_channels,
    scale_add,
    select_channels,
    softmax_channels,
    upsample2,
)


def conv2d_naive(x, k, bias, stride=1, padding=0):
    """Reference cross-correlation, quadruple loop."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[bi, co, i, j] = (patch * k[co]).sum() + bias[co]
    return out


def _weighted_sum(t, proj, tape):
    """Scalar projection sum(t * proj); taped so grad_check can drive any op."""
    out = Tensor((t.data * proj).sum())
    if tape is not None:
        def backward():
            from fedmenu.tensor import accumulate
            accumulate(t, float(out.grad) * proj)
        tape.record(out, backward)
    return out


class TestTensorBasics:
    def test_float64_and_shape(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert t.size == 4

    def test_copy_is_independent(self):
        t = Tensor(np.ones(3))
        c = t.copy()
        c.data[0] = 7.0
        assert t.data[0] == 1.0

    def test_backward_requires_scalar(self):
        tape = GradTape()
        t = Tensor(np.ones((2, 2)))
        with pytest.raises(DimensionError):
            tape.backward(t)


class TestConv2d:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        for b, cin, cout, h, w, k, stride, pad in [
                (1, 1, 1, 5, 5, 3, 1, 0),
                (2, 3, 4, 9, 9, 3, 1, 1),
                (2, 4, 2, 9, 9, 5, 2, 2),
                (1, 2, 3, 7, 8, 1, 1, 0)]:
            x = rng.normal(size=(b, cin, h, w))
            ker = rng.normal(size=(cout, cin, k, k))
            bias = rng.normal(size=cout)
            got = conv2d(Tensor(x), Tensor(ker), Tensor(bias),
                         stride=stride, padding=pad).data
            want = conv2d_naive(x, ker, bias, stride, pad)
            assert np.max(np.abs(got - want)) <= 1e-12

    def test_rejects_even_kernel(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))),
                   Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_rejects_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))),
                   Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_rejects_bad_geometry(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))),
                   Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)),
                   stride=2)  # (4 - 3) % 2 != 0

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        proj = np.cos(np.arange(2 * 3 * 5 * 5)).reshape(2, 3, 5, 5)

        def fn(tape):
            out = conv2d(x, k, b, padding=1, tape=tape)
            return _weighted_sum(out, proj, tape)

        assert grad_check(fn, [x, k, b]) < 1e-7

    def test_non_finite_detection(self):
        x = Tensor(np.full((1, 1, 3, 3), np.inf))
        with pytest.raises(NonFiniteError):
            conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


class TestActivations:
    def test_instance_norm_moments(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(2.0, 3.0, size=(2, 3, 8, 8)))
        y = instance_norm(x).data
        means = y.mean(axis=(2, 3))
        stds = y.std(axis=(2, 3))
        assert np.max(np.abs(means)) < 1e-12
        assert np.max(np.abs(stds - 1.0)) < 1e-4

    def test_instance_norm_gradient(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        proj = np.sin(np.arange(32, dtype=np.float64)).reshape(1, 2, 4, 4)
        err = grad_check(lambda tape: _weighted_sum(
            instance_norm(x, tape=tape), proj, tape), [x])
        assert err < 1e-6

    def test_leaky_relu_values(self):
        x = Tensor(np.array([[[[-2.0, 0.0], [3.0, -0.5]]]]))
        y = leaky_relu(x, 0.1).data
        assert np.allclose(y, [[[[-0.2, 0.0], [3.0, -0.05]]]])

    def test_leaky_relu_gradient(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, 1, 4, 4)) + 0.05)
        proj = np.cos(np.arange(16, dtype=np.float64)).reshape(1, 1, 4, 4)
        err = grad_check(lambda tape: _weighted_sum(
            leaky_relu(x, 0.2, tape), proj, tape), [x])
        assert err < 1e-6

    def test_softmax_normalizes(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)) * 30)
        s = softmax_channels(x).data
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert (s >= 0).all()

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 3, 2, 2))
        a = softmax_channels(Tensor(x)).data
        b = softmax_channels(Tensor(x + 100.0)).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_softmax_gradient(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(1, 3, 2, 2)))
        proj = np.sin(np.arange(12, dtype=np.float64)).reshape(1, 3, 2, 2)
        err = grad_check(lambda tape: _weighted_sum(
            softmax_channels(x, tape), proj, tape), [x])
        assert err < 1e-6


class TestPoolingResampling:
    def test_maxpool_values(self):
        x = Tensor(np.array([[[[1.0, 2.0, 0.0, 0.0],
                               [3.0, 4.0, 0.0, 5.0],
                               [1.0, 1.0, 2.0, 2.0],
                               [1.0, 1.0, 2.0, 2.0]]]]))
        y = maxpool2(x).data
        assert np.allclose(y, [[[[4.0, 5.0], [1.0, 2.0]]]])

    def test_maxpool_tie_gradient_goes_to_first(self):
        # all-equal window: gradient routes to the first element in scan order
        x = Tensor(np.ones((1, 1, 2, 2)))
        tape = GradTape()
        y = maxpool2(x, tape)
        s = _weighted_sum(y, np.ones((1, 1, 1, 1)), tape)
        tape.backward(s)
        assert np.allclose(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_maxpool_gradient(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        proj = np.cos(np.arange(8, dtype=np.float64)).reshape(1, 2, 2, 2)
        err = grad_check(lambda tape: _weighted_sum(
            maxpool2(x, tape), proj, tape), [x])
        assert err < 1e-6

    def test_maxpool_rejects_odd_size(self):
        with pytest.raises(ConfigurationError):
            maxpool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample_values_and_gradient(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        y = upsample2(x).data
        assert np.allclose(y[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                     [3, 3, 4, 4], [3, 3, 4, 4]])
        proj = np.sin(np.arange(16, dtype=np.float64)).reshape(1, 1, 4, 4)
        err = grad_check(lambda tape: _weighted_sum(
            upsample2(x, tape), proj, tape), [x])
        assert err < 1e-6


class TestChannelOps:
    def test_concat_and_gradient(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.normal(size=(1, 2, 3, 3)))
        b = Tensor(rng.normal(size=(1, 1, 3, 3)))
        y = concat_channels([a, b]).data
        assert y.shape == (1, 3, 3, 3)
        assert np.allclose(y[:, :2], a.data) and np.allclose(y[:, 2:], b.data)
        proj = np.cos(np.arange(27, dtype=np.float64)).reshape(1, 3, 3, 3)
        err = grad_check(lambda tape: _weighted_sum(
            concat_channels([a, b], tape), proj, tape), [a, b])
        assert err < 1e-6

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            concat_channels([Tensor(np.zeros((1, 1, 3, 3))),
                             Tensor(np.zeros((1, 1, 4, 4)))])

    def test_select_and_merge(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)))
        sel = select_channels(x, [2, 0]).data
        assert np.allclose(sel[:, 0], x.data[:, 2])
        assert np.allclose(sel[:, 1], x.data[:, 0])
        merged = merge_channels(x, [0, 3]).data
        assert np.allclose(merged[:, 0], x.data[:, 0] + x.data[:, 3])

    def test_select_merge_gradients(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(1, 3, 2, 2)))
        proj = np.sin(np.arange(8, dtype=np.float64)).reshape(1, 2, 2, 2)
        err = grad_check(lambda tape: _weighted_sum(
            select_channels(x, [1, 1], tape), proj, tape), [x])
        assert err < 1e-6
        proj1 = np.cos(np.arange(4, dtype=np.float64)).reshape(1, 1, 2, 2)
        err = grad_check(lambda tape: _weighted_sum(
            merge_channels(x, [0, 2], tape), proj1, tape), [x])
        assert err < 1e-6

    def test_merge_rejects_bad_ids(self):
        with pytest.raises(DimensionError):
            merge_channels(Tensor(np.zeros((1, 2, 2, 2))), [0, 5])


class TestElementwise:
    def test_add_scale_clamp_values(self):
        a = Tensor(np.full((2, 2), 1.5))
        b = Tensor(np.full((2, 2), 0.25))
        assert np.allclose(add(a, b).data, 1.75)
        assert np.allclose(scale_add(a, 2.0, -1.0).data, 2.0)
        assert np.allclose(clamp(a, 0.0, 1.0).data, 1.0)

    def test_clamp_gradient_masked(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]))
        tape = GradTape()
        y = clamp(x, 0.0, 1.0, tape)
        s = _weighted_sum(y, np.ones(3), tape)
        tape.backward(s)
        assert np.allclose(x.grad, [0.0, 1.0, 0.0])

    def test_gradients(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.normal(size=(3, 3)))
        b = Tensor(rng.normal(size=(3, 3)))
        proj = np.sin(np.arange(9, dtype=np.float64)).reshape(3, 3)
        err = grad_check(lambda tape: _weighted_sum(
            add(a, b, tape), proj, tape), [a, b])
        assert err < 1e-6
        err = grad_check(lambda tape: _weighted_sum(
            scale_add(a, -0.7, 0.3, tape), proj, tape), [a])
        assert err < 1e-6


class TestGradCheck:
    def test_rejects_bad_step(self):
        x = Tensor(np.ones(1))
        with pytest.raises(ConfigurationError):
            grad_check(lambda tape: scale_add(x, 1.0, 0.0, tape), [x],
                       step=1e-2)

    def test_determinism(self):
        rng = np.random.default_rng(13)
        data = rng.normal(size=(1, 2, 4, 4))
        proj = np.cos(np.arange(32, dtype=np.float64)).reshape(1, 2, 4, 4)

        def run():
            x = Tensor(data.copy())
            return grad_check(lambda tape: _weighted_sum(
                instance_norm(x, tape=tape), proj, tape), [x])

        assert run() == run()
