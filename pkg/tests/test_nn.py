import numpy as np
import pytest

from hypothesis import given, settings, strategies as st

from scenevae import nn
from scenevae.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, batch_norm2d, conv2d, conv_transpose2d
from scenevae.rng import Rng
from scenevae.tensor import ShapeError, Tensor, finite_difference_check, leaky_relu, no_grad, square, tsum


def conv2d_loops(x, w, b, stride, pad):
    """Direct six-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + k, s * stride:s * stride + k]
                    out[i, j, r, s] = (patch * w[j]).sum() + (0 if b is None else b[j])
    return out


class TestConv2d:
    def test_ones_kernel_stride2(self):
        y = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]), stride=2)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 4.0))

    def test_downsampling_shape(self):
        y = conv2d(Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros((2, 3, 3, 3))), stride=2, padding=1)
        assert y.shape == (1, 2, 32, 32)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (2, 0, 2), (1, 1, 3), (2, 1, 4)])
    def test_matches_loops(self, f64, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, conv2d_loops(x, w, b, stride, pad), atol=1e-12)

    def test_gradients(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        fn = lambda x, w, b: square(conv2d(x, w, b, stride=2, padding=1)).sum()
        assert finite_difference_check(fn, [x, w, b], epsilon=1e-6) < 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_degenerate_output(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestConvTranspose2d:
    def test_block_expansion(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y = conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        expect = np.kron(x[0, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(y.data[0, 0], expect)

    def test_upsampling_shape(self):
        y = conv_transpose2d(Tensor(np.zeros((1, 2, 32, 32))), Tensor(np.zeros((2, 3, 4, 4))), stride=2, padding=1)
        assert y.shape == (1, 3, 64, 64)

    @pytest.mark.parametrize("k,stride,pad,size,opad", [(3, 2, 1, 8, 1), (4, 2, 1, 8, 0), (3, 1, 1, 6, 0), (2, 2, 0, 8, 0)])
    def test_adjoint_identity(self, f64, rng, k, stride, pad, size, opad):
        """<conv(x), y> == <x, conv_transpose(y)> with a shared kernel."""
        x = rng.standard_normal((2, 3, size, size))
        w = rng.standard_normal((4, 3, k, k))
        cx = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
        y = rng.standard_normal(cx.shape)
        ty = conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=pad, output_padding=opad).data
        assert ty.shape == x.shape
        lhs, rhs = (cx * y).sum(), (x * ty).sum()
        assert abs(lhs - rhs) / max(1.0, abs(lhs)) < 1e-5

    def test_adjoint_float32(self, rng):
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        cx = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        y = rng.standard_normal(cx.shape).astype(np.float32)
        ty = conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1, output_padding=1).data
        lhs, rhs = float((cx * y).sum(dtype=np.float64)), float((x * ty).sum(dtype=np.float64))
        assert abs(lhs - rhs) / abs(lhs) < 1e-5

    def test_gradients(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        fn = lambda x, w, b: square(conv_transpose2d(x, w, b, stride=2, padding=1)).sum()
        assert finite_difference_check(fn, [x, w, b], epsilon=1e-6) < 1e-4

    def test_output_padding_range(self):
        with pytest.raises(ValueError):
            conv_transpose2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, output_padding=2)


class TestBatchNorm:
    def _run(self, x, gamma=None, beta=None, training=True):
        c = x.shape[1]
        gamma = np.ones(c) if gamma is None else gamma
        beta = np.zeros(c) if beta is None else beta
        rm, rv = np.zeros(c), np.ones(c)
        y = batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training=training)
        return y.data, rm, rv

    def test_standardized_input_unchanged(self, f64, rng):
        x = rng.standard_normal((8, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y, _, _ = self._run(x)
        np.testing.assert_allclose(y, x, atol=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 6), st.floats(-50, 50), st.floats(0.1, 20), st.integers(0, 2**31 - 1))
    def test_train_output_moments(self, n, shift, scale, seed):
        x = shift + scale * np.random.default_rng(seed).standard_normal((n, 3, 3, 3))
        x = x.astype(np.float32)
        y, _, _ = self._run(x)
        v = x.astype(np.float64).var(axis=(0, 2, 3))
        # float32 centring error grows with |mean| / std of the input
        cond = np.abs(x.astype(np.float64).mean(axis=(0, 2, 3))) / np.sqrt(v)
        assert (np.abs(y.mean(axis=(0, 2, 3))) < 1e-5 + 8 * np.finfo(np.float32).eps * cond).all()
        # the eps term shrinks the output variance to v / (v + eps)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), v / (v + 1e-5), atol=1e-4)
        if v.min() >= 1e-2:
            assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-3

    def test_zero_gamma_gives_beta(self, rng):
        beta = np.array([0.5, -2.0], dtype=np.float32)
        y, _, _ = self._run(rng.standard_normal((4, 2, 3, 3)).astype(np.float32), gamma=np.zeros(2, np.float32), beta=beta)
        np.testing.assert_array_equal(y, np.broadcast_to(beta.reshape(1, 2, 1, 1), y.shape))

    def test_running_stats_update(self, f64, rng):
        x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
        _, rm, rv = self._run(x)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_eval_is_pure(self, rng):
        bn = BatchNorm2d(3).eval()
        bn.running_mean[:] = [1, 2, 3]
        bn.running_var[:] = [4, 5, 6]
        x = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
        a, b = bn(x).data, bn(x).data
        assert a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(bn.running_mean, [1, 2, 3])
        expect = (x.data - bn.running_mean.reshape(1, 3, 1, 1)) / np.sqrt(bn.running_var.reshape(1, 3, 1, 1) + 1e-5)
        np.testing.assert_allclose(a, expect, rtol=1e-5, atol=1e-6)

    def test_train_needs_two_samples(self):
        with pytest.raises(ShapeError):
            self._run(np.zeros((1, 2, 3, 3), np.float32))

    def test_gradients(self, f64, rng):
        x = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        weights = rng.standard_normal((3, 2, 3, 3))

        def fn(x, g, b):
            y = batch_norm2d(x, g, b, np.zeros(2), np.ones(2), training=True)
            return tsum(square(y * Tensor(weights)))

        assert finite_difference_check(fn, [x, g, b], epsilon=1e-6) < 1e-4

    def test_eval_gradients(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
        fn = lambda x, g, b: tsum(square(batch_norm2d(x, g, b, rm, rv, training=False)))
        assert finite_difference_check(fn, [x, g, b], epsilon=1e-6) < 1e-4


class TestLeakyRelu:
    def test_values(self):
        y = leaky_relu(Tensor([-1.0, 2.0, 0.0]), 0.01).data
        np.testing.assert_allclose(y, [-0.01, 2.0, 0.0])

    def test_positive_independent_of_slope(self):
        for slope in (0.0, 0.2, 0.9):
            assert leaky_relu(Tensor([2.0]), slope).data[0] == 2.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
    def test_slope_one_is_identity(self, xs):
        x = np.array(xs, dtype=np.float32)
        np.testing.assert_array_equal(leaky_relu(Tensor(x), 1.0).data, x)

    def test_module_default_slope(self):
        assert nn.LeakyReLU().slope == 0.01


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        y = nn.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(y.data, x)

    def test_small_example(self):
        y = nn.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(y.data, [[6.0]])

    def test_gradients(self, f64, rng):
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        fn = lambda x, w, b: square(nn.linear(x, w, b)).sum()
        assert finite_difference_check(fn, [x, w, b], epsilon=1e-6) < 1e-4

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            nn.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestReparameterize:
    def test_zero_eps_gives_mu(self, rng):
        mu = rng.standard_normal(5).astype(np.float32)
        z = nn.reparameterize(Tensor(mu), Tensor(rng.standard_normal(5)), np.zeros(5))
        np.testing.assert_array_equal(z.data, mu)

    def test_standard_posterior_gives_eps(self, rng):
        eps = rng.standard_normal(5).astype(np.float32)
        z = nn.reparameterize(Tensor(np.zeros(5)), Tensor(np.zeros(5)), eps)
        np.testing.assert_array_equal(z.data, eps)

    def test_monte_carlo_std(self, f64):
        n = 100_000
        eps = Rng(7, "mc").normal(n)
        z = nn.reparameterize(Tensor(np.zeros(n)), Tensor(np.full(n, np.log(4.0))), eps).data
        assert abs(z.std() - 2.0) / 2.0 < 0.02

    def test_gradients(self, f64, rng):
        mu = Tensor(rng.standard_normal(6), requires_grad=True)
        lv = Tensor(rng.standard_normal(6) * 0.5, requires_grad=True)
        eps = rng.standard_normal(6)
        fn = lambda mu, lv: square(nn.reparameterize(mu, lv, eps)).sum()
        assert finite_difference_check(fn, [mu, lv], epsilon=1e-6) < 1e-4


class TestModules:
    def test_kaiming_scale(self):
        conv = Conv2d(64, 128, 3, rng=Rng(0, "init"))
        std = conv.weight.data.std()
        expect = np.sqrt(2 / (1 + 0.01 ** 2)) / np.sqrt(64 * 9)
        assert abs(std - expect) / expect < 0.02

    def test_state_dict_roundtrip(self):
        a = Linear(4, 3, rng=Rng(0, "a"))
        b = Linear(4, 3, rng=Rng(1, "b"))
        b.load_state_dict(a.state_dict())
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_load_state_dict_rejects_mismatch(self):
        a = Linear(4, 3, rng=Rng(0, "a"))
        with pytest.raises(ShapeError):
            a.load_state_dict({"weight": np.zeros((2, 2)), "bias": np.zeros(3)})
        with pytest.raises(KeyError):
            a.load_state_dict({"weight": np.zeros((3, 4))})

    def test_buffers_in_state_dict(self):
        assert set(BatchNorm2d(2).state_dict()) == {"gamma", "beta", "running_mean", "running_var"}

    def test_convtranspose_layer_shape(self):
        layer = ConvTranspose2d(4, 2, 4, stride=2, padding=1, rng=Rng(0, "t"))
        with no_grad():
            assert layer(Tensor(np.zeros((1, 4, 5, 5)))).shape == (1, 2, 10, 10)
