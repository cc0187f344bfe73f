import numpy as np
import pytest

from tprop.errors import ConfigError, DataError, DimensionError
from tprop.tensor import (
    POOL_SENTINEL,
    Kernel4D,
    activation,
    activation_deriv,
    conv2d,
    conv2d_transpose,
    conv2d_weight_grad,
    matmul,
    maxpool,
    maxpool_jvp,
    maxpool_vjp,
    softmax_ce_grad,
)

from oracles import (
    central_difference,
    naive_conv2d,
    naive_conv2d_transpose,
    naive_matmul,
    naive_maxpool,
)


class TestMatmul:
    def test_two_by_two(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(out, [3.0, 7.0])

    def test_identity(self):
        x = np.random.default_rng(0).standard_normal(6)
        np.testing.assert_array_equal(matmul(np.eye(6), x), x)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestConv2d:
    def test_all_ones(self):
        out = conv2d(np.ones((1, 1, 3, 3)), Kernel4D(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(2).standard_normal((2, 3, 6, 5))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, Kernel4D(w, 1, 1)), x)

    def test_against_naive_loops(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 5, 5))
        out = conv2d(x, Kernel4D(w, 1, 2))
        assert np.max(np.abs(out - naive_conv2d(x, w, 1, 2))) < 1e-10

    @pytest.mark.parametrize("stride,pad", [(2, 0), (2, 1), (3, 2)])
    def test_strided_against_naive_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.standard_normal((1, 2, 9, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        out = conv2d(x, Kernel4D(w, stride, pad))
        assert np.max(np.abs(out - naive_conv2d(x, w, stride, pad))) < 1e-10

    def test_output_shape_formula(self):
        out = conv2d(np.zeros((1, 1, 10, 7)), Kernel4D(np.zeros((2, 1, 3, 2)), 2, 1))
        assert out.shape == (1, 2, (10 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            conv2d(np.zeros((1, 1, 2, 2)), Kernel4D(np.zeros((1, 1, 5, 5))))

    def test_invalid_kernel_stride(self):
        with pytest.raises(ConfigError):
            Kernel4D(np.zeros((1, 1, 3, 3)), stride=0)


class TestConv2dTranspose:
    def test_adjoint_identity_random_triples(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            stride = int(rng.integers(1, 4))
            pad = int(rng.integers(0, 3))
            kh = int(rng.integers(1, 5))
            h = int(rng.integers(kh, 10))
            x = rng.standard_normal((2, 3, h, h + 1))
            k = Kernel4D(rng.standard_normal((4, 3, kh, kh)), stride, pad)
            y = conv2d(x, k)
            g = rng.standard_normal(y.shape)
            lhs = np.sum(y * g)
            rhs = np.sum(x * conv2d_transpose(g, k, x.shape))
            assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs)), trial

    def test_delta_kernel_scatter_is_identity(self):
        g = np.random.default_rng(5).standard_normal((1, 2, 4, 4))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d_transpose(g, Kernel4D(w, 1, 1), g.shape), g)

    def test_stride_two_against_scatter_oracle(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((3, 2, 5, 5))
        k = Kernel4D(w, 2, 2)
        shape = (2, 2, 16, 16)
        g = rng.standard_normal((2, 3, 8, 8))
        out = conv2d_transpose(g, k, shape)
        assert np.max(np.abs(out - naive_conv2d_transpose(g, w, 2, 2, shape))) < 1e-10

    def test_uneven_stride_input_shapes(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((1, 1, 3, 3))
        k = Kernel4D(w, 2, 0)
        for h in (7, 8):  # both map to 3 output rows
            g = rng.standard_normal((1, 1, 3, 3))
            out = conv2d_transpose(g, k, (1, 1, h, h))
            np.testing.assert_allclose(out, naive_conv2d_transpose(g, w, 2, 0, (1, 1, h, h)), atol=1e-12)

    def test_inconsistent_declared_shape(self):
        k = Kernel4D(np.zeros((1, 1, 3, 3)))
        with pytest.raises(DimensionError):
            conv2d_transpose(np.zeros((1, 1, 4, 4)), k, (1, 1, 5, 5))

    def test_weight_grad_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        g = rng.standard_normal((2, 3, 3, 3))
        k = Kernel4D(w, 2, 1)
        analytic = conv2d_weight_grad(x, g, k)
        numeric = central_difference(lambda ww: np.sum(conv2d(x, Kernel4D(ww, 2, 1)) * g), w)
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)


class TestMaxpool:
    def test_two_by_two(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out, idx = maxpool(x, 2, 2, 0)
        assert out.item() == 4.0
        assert idx.flat.item() == 3

    def test_constant_input_picks_lowest_index(self):
        x = np.ones((1, 1, 4, 4))
        out, idx = maxpool(x, 2, 2, 0)
        np.testing.assert_array_equal(idx.flat[0, 0], [[0, 2], [8, 10]])
        np.testing.assert_array_equal(out, 1.0)

    def test_against_loop_oracle(self):
        x = np.random.default_rng(9).standard_normal((1, 1, 7, 7))
        out, idx = maxpool(x, 3, 2, 1)
        ref_out, ref_idx = naive_maxpool(x, 3, 2, 1)
        np.testing.assert_array_equal(out, ref_out)
        np.testing.assert_array_equal(idx.flat, ref_idx)

    def test_all_padding_window_gives_sentinel(self):
        x = np.random.default_rng(10).standard_normal((1, 1, 2, 2))
        out, idx = maxpool(x, 2, 3, 2)
        assert idx.flat[0, 0, 0, 0] == POOL_SENTINEL
        assert out[0, 0, 0, 0] == 0.0
        g = np.ones_like(out)
        np.testing.assert_array_equal(maxpool_vjp(g, idx, x.shape)[0, 0], [[0, 0], [0, 1]])

    def test_vjp_routes_to_winner(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        _, idx = maxpool(x, 2, 2, 0)
        grad = maxpool_vjp(np.ones((1, 1, 1, 1)), idx, x.shape)
        np.testing.assert_array_equal(grad, [[[[0, 0], [0, 1]]]])

    def test_vjp_zeros(self):
        x = np.random.default_rng(11).standard_normal((2, 3, 6, 6))
        out, idx = maxpool(x, 3, 2, 1)
        np.testing.assert_array_equal(maxpool_vjp(np.zeros_like(out), idx, x.shape), 0.0)

    def test_vjp_is_adjoint_of_finite_difference_jvp(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((2, 2, 7, 7))  # continuous draws: no ties
        out, idx = maxpool(x, 3, 2, 1)
        u = rng.standard_normal(x.shape)
        g = rng.standard_normal(out.shape)
        h = 1e-6
        fd = (maxpool(x + h * u, 3, 2, 1)[0] - maxpool(x - h * u, 3, 2, 1)[0]) / (2 * h)
        assert abs(np.sum(fd * g) - np.sum(u * maxpool_vjp(g, idx, x.shape))) < 1e-8
        np.testing.assert_allclose(maxpool_jvp(u, idx), fd, atol=1e-8)

    def test_stale_indices(self):
        _, idx = maxpool(np.zeros((1, 1, 4, 4)), 2, 2)
        with pytest.raises(DimensionError):
            maxpool_vjp(np.zeros((1, 1, 3, 3)), idx, (1, 1, 6, 6))

    def test_identity_pool(self):
        x = np.random.default_rng(13).standard_normal((1, 2, 3, 3))
        out, idx = maxpool(x, 1, 1, 0)
        np.testing.assert_array_equal(out, x)
        np.testing.assert_array_equal(maxpool_vjp(x, idx, x.shape), x)


class TestActivation:
    def test_elu_at_zero(self):
        assert activation(np.array([0.0]), "elu")[0] == 0.0
        assert activation_deriv(np.array([0.0]), "elu")[0] == 1.0

    def test_tanh_derivative_identity(self):
        x = np.random.default_rng(14).standard_normal(10)
        assert np.max(np.abs(activation_deriv(x, "tanh") - (1 - np.tanh(x) ** 2))) < 1e-12

    @pytest.mark.parametrize("x0", [-0.5, 0.5])
    def test_elu_derivative_finite_differences(self, x0):
        h = 1e-5
        fd = (activation(np.array([x0 + h]), "elu") - activation(np.array([x0 - h]), "elu")) / (2 * h)
        assert abs(activation_deriv(np.array([x0]), "elu")[0] - fd[0]) < 1e-6

    @pytest.mark.parametrize("kind", ["elu", "tanh", "linear"])
    def test_derivatives_match_finite_differences(self, kind):
        x = np.random.default_rng(15).uniform(-3, 3, 50)
        x = x[np.abs(x) > 1e-3]
        h = 1e-5
        fd = (activation(x + h, kind) - activation(x - h, kind)) / (2 * h)
        assert np.max(np.abs(activation_deriv(x, kind) - fd)) < 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            activation(np.zeros(2), "relu6")


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        loss, grad = softmax_ce_grad(np.zeros((3, 2)), y)
        assert abs(loss - np.log(2)) < 1e-15
        np.testing.assert_allclose(grad, (0.5 - y) / 3, atol=1e-15)

    def test_saturated_logits(self):
        y = np.eye(3)
        loss, grad = softmax_ce_grad(1e3 * y, y)
        assert loss < 1e-300 + 1e-12
        assert np.max(np.abs(grad)) < 1e-12

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(16)
        logits = rng.standard_normal((3, 5))
        labels = np.array([0, 4, 2])
        _, grad = softmax_ce_grad(logits, labels)
        numeric = central_difference(lambda z: softmax_ce_grad(z, labels)[0], logits)
        assert np.max(np.abs(grad - numeric)) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            softmax_ce_grad(np.zeros((2, 3)), np.array([0, 3]))

    def test_not_one_hot(self):
        with pytest.raises(DataError):
            softmax_ce_grad(np.zeros((1, 3)), np.array([[1.0, 1.0, 0.0]]))
