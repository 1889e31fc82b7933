import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klif import ops
from klif.ops import (
    ContextError,
    NumericalError,
    RunningStats,
    ShapeError,
    avgpool1d_backward,
    avgpool1d_forward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    maxpool2d_backward,
    maxpool2d_forward,
)

from conftest import max_rel_err, numeric_grad


def conv_loop(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    y[ni, oi, i, j] = np.sum(xp[ni, :, i:i + 3, j:j + 3] * w[oi]) + b[oi]
    return y


def maxpool_loop(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for b in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    y[a, b, i, j] = x[a, b, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    return y


class TestConv2d:
    def test_ones_center_is_nine(self):
        y, _ = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert y[0, 0, 1, 1] == 9.0
        # corners see only a 2x2 patch of the padded input
        assert y[0, 0, 0, 0] == 4.0

    def test_zero_kernel_gives_bias(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        b = np.array([0.5, -1.0])
        y, _ = conv2d_forward(x, np.zeros((2, 3, 3, 3)), b)
        assert np.all(y[:, 0] == 0.5) and np.all(y[:, 1] == -1.0)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 4, 8, 8))
        w = rng.normal(size=(3, 4, 3, 3))
        b = rng.normal(size=3)
        y, _ = conv2d_forward(x, w, b)
        np.testing.assert_allclose(y, conv_loop(x, w, b), atol=1e-6)

    def test_float32_preserved(self, rng):
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        w = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
        y, _ = conv2d_forward(x, w, np.zeros(2, np.float32))
        assert y.dtype == np.float32

    def test_shape_errors_name_the_dimension(self):
        with pytest.raises(ShapeError, match="input channels"):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeError, match="kernel height"):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 5, 3)), np.zeros(1))
        with pytest.raises(ShapeError, match="bias"):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(2))

    def test_backward_finite_differences(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        w = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        r = rng.normal(size=(1, 2, 4, 4))

        def loss():
            return float(np.sum(conv2d_forward(x, w, b)[0] * r))

        _, ctx = conv2d_forward(x, w, b)
        gx, gw, gb = conv2d_backward(ctx, r)
        assert max_rel_err(gx, numeric_grad(loss, x)) < 1e-4
        assert max_rel_err(gw, numeric_grad(loss, w)) < 1e-4
        assert max_rel_err(gb, numeric_grad(loss, b)) < 1e-4

    def test_zero_upstream_gives_zero_grads(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        _, ctx = conv2d_forward(x, rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        gx, gw, gb = conv2d_backward(ctx, np.zeros((2, 3, 4, 4)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_routes_grad(self, rng):
        # a kernel with a single 1 at (0, 0) reads x[i-1, j-1]; its input gradient
        # is grad_out shifted by (+1, +1) with the last row/column dropped
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 0, 0] = 1.0
        x = rng.normal(size=(1, 1, 5, 5))
        g = rng.normal(size=(1, 1, 5, 5))
        _, ctx = conv2d_forward(x, w, np.zeros(1))
        gx, _, _ = conv2d_backward(ctx, g)
        expected = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                if i + 1 < 5 and j + 1 < 5:
                    expected[i, j] = g[0, 0, i + 1, j + 1]
        np.testing.assert_array_equal(gx[0, 0], expected)

    def test_context_single_use(self, rng):
        _, ctx = conv2d_forward(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1))
        conv2d_backward(ctx, np.ones((1, 1, 4, 4)))
        with pytest.raises(ContextError):
            conv2d_backward(ctx, np.ones((1, 1, 4, 4)))

    def test_nan_input_is_rejected(self):
        x = np.ones((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NumericalError):
            conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.normal(size=(3, 4))
        y, _ = linear_forward(x, np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(y, x)

    def test_hand_dot_product(self):
        y, _ = linear_forward(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([5.0]))
        assert y.tolist() == [[16.0]]

    def test_backward_finite_differences(self, rng):
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(4, 5))
        b = rng.normal(size=4)
        r = rng.normal(size=(3, 4))

        def loss():
            return float(np.sum(linear_forward(x, w, b)[0] * r))

        _, ctx = linear_forward(x, w, b)
        gx, gw, gb = linear_backward(ctx, r)
        for a, p in ((gx, x), (gw, w), (gb, b)):
            assert max_rel_err(a, numeric_grad(loss, p)) < 1e-4

    def test_shape_error(self):
        with pytest.raises(ShapeError, match="input features"):
            linear_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))


class TestMaxPool:
    def test_window_max_and_routing(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y, ctx = maxpool2d_forward(x)
        assert y.item() == 4.0
        gx = maxpool2d_backward(ctx, np.array([[[[7.0]]]]))
        np.testing.assert_array_equal(gx[0, 0], [[0, 0], [0, 7.0]])

    def test_constant_input(self):
        y, ctx = maxpool2d_forward(np.full((1, 2, 4, 4), 3.5))
        assert np.all(y == 3.5)
        # ties go to the first element in row-major order
        gx = maxpool2d_backward(ctx, np.ones((1, 2, 2, 2)))
        assert np.all(gx[:, :, ::2, ::2] == 1) and gx.sum() == 8

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(1, 1, 6, 6))
        y, _ = maxpool2d_forward(x)
        np.testing.assert_array_equal(y, maxpool_loop(x))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2d_forward(np.zeros((1, 1, 5, 4)))

    def test_backward_finite_differences(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        r = rng.normal(size=(2, 2, 2, 2))

        def loss():
            return float(np.sum(maxpool2d_forward(x)[0] * r))

        _, ctx = maxpool2d_forward(x)
        assert max_rel_err(maxpool2d_backward(ctx, r), numeric_grad(loss, x)) < 1e-4


class TestAvgPool1d:
    def test_mean_of_one_to_ten(self):
        y, _ = avgpool1d_forward(np.arange(1.0, 11.0).reshape(1, 10), 10)
        assert y.tolist() == [[5.5]]

    def test_constant(self):
        y, _ = avgpool1d_forward(np.full((2, 30), 0.25), 10)
        assert np.all(y == 0.25)

    def test_matches_loop_oracle(self, rng):
        x = rng.random((3, 100))
        y, _ = avgpool1d_forward(x, 10)
        ref = np.array([[sum(x[n, 10 * c:10 * c + 10]) / 10 for c in range(10)] for n in range(3)])
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_backward_spreads_uniformly(self):
        _, ctx = avgpool1d_forward(np.zeros((1, 20)), 10)
        g = avgpool1d_backward(ctx, np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(g[0], [0.1] * 10 + [0.2] * 10)

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            avgpool1d_forward(np.zeros((1, 15)), 10)


class TestBatchNorm:
    def test_train_output_statistics(self, rng):
        x = rng.normal(3.0, 2.0, size=(8, 3, 5, 5))
        gamma = np.array([1.5, -0.5, 2.0])
        beta = np.array([0.1, -0.2, 0.3])
        y, _ = batchnorm_forward(x, gamma, beta, RunningStats(3, np.float64), train=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-4)
        # variance eps makes the std fall short of |gamma| by ~gamma*eps/(2 var)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), np.abs(gamma), atol=1e-4)

    def test_standardized_input_is_fixed_point(self, rng):
        x = rng.normal(size=(16, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), RunningStats(2, np.float64), train=True)
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_running_stats_and_eval_mode(self, rng):
        x = rng.normal(2.0, 3.0, size=(64, 2))
        rs = RunningStats(2, np.float64)
        batchnorm_forward(x, np.ones(2), np.zeros(2), rs, train=True)
        np.testing.assert_allclose(rs.mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rs.var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
        before = rs.mean.copy()
        y, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), rs, train=False)
        np.testing.assert_array_equal(rs.mean, before)
        np.testing.assert_allclose(y, (x - rs.mean) / np.sqrt(rs.var + ops.BN_EPS))

    @pytest.mark.parametrize("train", [True, False])
    def test_backward_finite_differences(self, rng, train):
        x = rng.normal(size=(3, 2, 3, 3))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.normal(size=2)
        r = rng.normal(size=x.shape)
        rs = RunningStats(2, np.float64)
        rs.mean[:] = [0.2, -0.1]
        rs.var[:] = [1.3, 0.7]

        def loss():
            rs_copy = RunningStats(2, np.float64)
            rs_copy.mean[:], rs_copy.var[:] = rs.mean, rs.var
            return float(np.sum(batchnorm_forward(x, gamma, beta, rs_copy, train)[0] * r))

        rs_copy = RunningStats(2, np.float64)
        rs_copy.mean[:], rs_copy.var[:] = rs.mean, rs.var
        _, ctx = batchnorm_forward(x, gamma, beta, rs_copy, train)
        gx, gg, gb = batchnorm_backward(ctx, r)
        for a, p in ((gx, x), (gg, gamma), (gb, beta)):
            assert max_rel_err(a, numeric_grad(loss, p), floor=1e-6) < 1e-3


class TestDropout:
    def test_p_zero_is_identity(self, rng):
        x = rng.normal(size=(4, 5))
        y, ctx = dropout_forward(x, 0.0, True, rng)
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(dropout_backward(ctx, x), x)

    def test_eval_is_identity(self, rng):
        x = rng.normal(size=(4, 5))
        y, _ = dropout_forward(x, 0.9, False)
        np.testing.assert_array_equal(y, x)

    def test_law_of_large_numbers(self):
        x = np.ones(10 ** 6)
        y, _ = dropout_forward(x, 0.5, True, np.random.default_rng(7))
        survivors = np.count_nonzero(y) / y.size
        assert abs(survivors - 0.5) < 0.01
        assert abs(y.mean() - 1.0) < 0.01

    def test_seed_reproducible(self):
        x = np.ones((50, 50))
        a, _ = dropout_forward(x, 0.5, True, np.random.default_rng(3))
        b, _ = dropout_forward(x, 0.5, True, np.random.default_rng(3))
        assert a.tobytes() == b.tobytes()

    def test_backward_uses_mask(self, rng):
        x = rng.normal(size=(6, 6))
        y, ctx = dropout_forward(x, 0.5, True, np.random.default_rng(0))
        g = dropout_backward(ctx, np.ones_like(x))
        np.testing.assert_array_equal(g == 0, y == 0)

    def test_bad_p(self):
        with pytest.raises(ValueError):
            dropout_forward(np.ones(3), 1.0, True, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(1, 5),
       w=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_conv_loop_oracle_property(n, c, o, h, w, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, h, w))
    wt = r.normal(size=(o, c, 3, 3))
    b = r.normal(size=o)
    np.testing.assert_allclose(conv2d_forward(x, wt, b)[0], conv_loop(x, wt, b), atol=1e-6)
