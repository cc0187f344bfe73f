import numpy as np
import pytest

from tprop.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from tprop.errors import ConfigError, DimensionError, FormatError, StateError
from tprop.net import (
    DIRECT,
    ConvBlock,
    ConvFeedback,
    FCLayer,
    LinearFeedback,
    Network,
    build_network,
    lenet,
    parse_architecture,
)
from tprop.tensor import Kernel4D

SMALL = lenet((4, 8), 32)


def random_probe(rng, shape):
    return rng.standard_normal(shape)


class TestArchitecture:
    def test_parse_table5_lenet(self):
        specs = parse_architecture(lenet())
        assert len(specs) == 4
        assert specs[0].channels == 32 and specs[0].pool_window == 3 and specs[0].pool_stride == 2
        assert specs[-1].final and specs[-1].units == 10

    def test_lenet_cifar_logits_shape(self):
        net = build_network((3, 32, 32), lenet(), seed=0, dtype=np.float32)
        out = net.forward(np.zeros((1, 3, 32, 32), dtype=np.float32))
        assert out.shape == (1, 10)
        assert net.shapes[1:] == [(32, 16, 16), (64, 8, 8), (512,), (10,)]

    def test_bad_lines(self):
        with pytest.raises(ConfigError):
            parse_architecture(["Conv 3x3x4", "FC 10"])
        with pytest.raises(ConfigError):
            parse_architecture(["Maxpool 2x2", "FC+Softmax 10"])
        with pytest.raises(ConfigError):
            parse_architecture(["FC+Softmax 3", "FC+Softmax 3"])

    def test_shape_chain_validated_at_construction(self):
        rng = np.random.default_rng(0)
        l0 = FCLayer(rng.standard_normal((5, 4)), np.zeros(5), "linear", (4,))
        l1 = FCLayer(rng.standard_normal((3, 6)), np.zeros(3), "linear", (6,), final=True)
        with pytest.raises(DimensionError):
            Network((4,), [l0, l1])

    def test_forward_input_shape_error(self):
        net = build_network((4,), ["FC 3", "FC+Softmax 2"])
        with pytest.raises(DimensionError):
            net.forward(np.zeros((2, 5)))


class TestForward:
    def test_identity_conv_block(self):
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        block = ConvBlock(Kernel4D(w, 1, 1), np.zeros(2), "linear", (1, 1, 0), (2, 5, 5))
        head = FCLayer(np.eye(50)[:3], np.zeros(3), "linear", (2, 5, 5), final=True)
        net = Network((2, 5, 5), [block, head], None)
        x = np.random.default_rng(1).standard_normal((3, 2, 5, 5))
        net.forward(x)
        np.testing.assert_array_equal(net.acts[1], x)

    def test_all_linear_fc_matches_matrix_product(self):
        net = build_network((6,), ["FC 5", "FC+Softmax 4"], act="linear", seed=3)
        x = np.random.default_rng(2).standard_normal((7, 6))
        for p in net.forward_params():
            p["bias"][...] = 0
        out = net.forward(x)
        t0, t1 = net.layers[0].weight, net.layers[1].weight
        assert np.max(np.abs(out - x @ (t1 @ t0).T)) < 1e-12


def _nets():
    return [
        build_network((6,), ["FC 5", "FC 4", "FC+Softmax 3"], act="elu", seed=1),
        build_network((6,), ["FC 5", "FC 4", "FC+Softmax 3"], act="tanh", seed=2),
        build_network((3, 12, 12), lenet((4, 8), 16), act="elu", seed=3),
        build_network((3, 12, 12), lenet((4, 8), 16), topology=DIRECT, seed=4),
    ]


class TestJacobians:
    @pytest.mark.parametrize("net", _nets())
    def test_vjp_is_adjoint_of_jvp(self, net):
        rng = np.random.default_rng(5)
        net.forward(rng.standard_normal((2, *net.input_shape)))
        for n in range(net.depth):
            u = rng.standard_normal(net.acts[n].shape)
            v = rng.standard_normal(net.acts[n + 1].shape)
            lhs = np.sum(net.jacobian_jvp(n, u) * v)
            rhs = np.sum(u * net.jacobian_T_vjp(n, v))
            assert abs(lhs - rhs) < 1e-9 * max(1, abs(lhs))

    @pytest.mark.parametrize("net", _nets()[:3])
    def test_vjp_matches_finite_differences(self, net):
        rng = np.random.default_rng(6)
        net.forward(rng.standard_normal((2, *net.input_shape)))
        for n in range(net.depth):
            s = net.acts[n]
            u = rng.standard_normal(s.shape)
            v = rng.standard_normal(net.acts[n + 1].shape)
            h = 1e-6
            fp = net.layers[n].forward(s + h * u)[0]
            fm = net.layers[n].forward(s - h * u)[0]
            fd = np.sum((fp - fm) / (2 * h) * v)
            assert abs(fd - np.sum(u * net.jacobian_T_vjp(n, v))) < 1e-6

    def test_linear_fc_vjp_is_transpose(self):
        net = build_network((4,), ["FC+Softmax 3"], act="linear")
        net.forward(np.ones((1, 4)))
        v = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_allclose(net.jacobian_T_vjp(0, v), v @ net.layers[0].weight, atol=1e-15)
        np.testing.assert_array_equal(net.jacobian_T_vjp(0, np.zeros((1, 3))), 0)

    def test_stale_cache(self):
        net = build_network((4,), ["FC 3", "FC+Softmax 2"])
        with pytest.raises(StateError):
            net.jacobian_T_vjp(0, np.zeros((1, 3)))
        net.forward(np.zeros((1, 4)))
        net.invalidate()
        with pytest.raises(StateError):
            net.feedback_jvp(1, np.zeros((1, 2)))


class TestFeedback:
    def test_fc_feedback_with_transpose(self):
        net = build_network((5,), ["FC 4", "FC+Softmax 3"], act="linear", seed=1)
        net.set_symmetric_feedback()
        x = np.random.default_rng(2).standard_normal((2, 5))
        net.forward(x)
        theta = net.layers[1].weight
        s1 = net.acts[1]
        recon = net.feedback_apply(1, net.layers[1].forward(s1)[0] - net.layers[1].bias)
        np.testing.assert_allclose(recon, s1 @ theta.T @ theta, atol=1e-12)

    def test_lenet_feedback_shapes(self):
        net = build_network((3, 32, 32), lenet(), dtype=np.float32)
        assert net.feedback[0] is None
        g1 = net.feedback[1]
        assert isinstance(g1, ConvFeedback)
        assert g1.source_shape == (64, 8, 8) and g1.target_shape == (32, 16, 16)
        assert g1.kernel.stride == 2
        out = g1.apply(np.zeros((2, 64, 8, 8), dtype=np.float32))
        assert out.shape == (2, 32, 16, 16)

    def test_mnist_lenet_feedback_shapes(self):
        net = build_network((1, 28, 28), lenet(), dtype=np.float32)
        assert net.shapes[1:3] == [(32, 14, 14), (64, 7, 7)]
        assert net.feedback[1].apply(np.ones((1, 64, 7, 7), np.float32)).shape == (1, 32, 14, 14)

    def test_zero_input_linear_feedback(self):
        net = build_network((5,), ["FC 4", "FC+Softmax 3"], act="linear")
        np.testing.assert_array_equal(net.feedback_apply(1, np.zeros((2, 3))), 0)

    def test_shape_mismatch(self):
        net = build_network((5,), ["FC 4", "FC+Softmax 3"])
        with pytest.raises(DimensionError):
            net.feedback_apply(1, np.zeros((2, 4)))
        with pytest.raises(DimensionError):
            net.feedback_apply(0, np.zeros((2, 4)))

    def test_direct_feedback_dims(self):
        net = build_network((3, 12, 12), SMALL, topology=DIRECT)
        for n in range(1, net.depth):
            g = net.feedback[n]
            assert isinstance(g, LinearFeedback)
            assert g.weight.shape == (np.prod(net.shapes[n]), 10)

    @pytest.mark.parametrize("net", _nets())
    def test_feedback_jvp_central_differences(self, net):
        rng = np.random.default_rng(7)
        net.forward(rng.standard_normal((2, *net.input_shape)))
        for n in range(1, net.depth):
            u = net.feedback_source(n)
            v = rng.standard_normal(u.shape)
            h = 1e-5
            fd = (net.feedback_apply(n, u + h * v) - net.feedback_apply(n, u - h * v)) / (2 * h)
            jv = net.feedback_jvp(n, v)
            np.testing.assert_allclose(jv, fd, atol=1e-7)
            np.testing.assert_allclose(net.feedback_jvp(n, 2 * v), 2 * jv, atol=1e-12)

    def test_linear_feedback_jvp(self):
        net = build_network((5,), ["FC 4", "FC+Softmax 3"], act="linear")
        net.forward(np.ones((1, 5)))
        v = np.array([[0.3, -1.0, 2.0]])
        np.testing.assert_allclose(net.feedback_jvp(1, v), v @ net.feedback[1].w.T, atol=1e-15)

    def test_symmetric_matches_transpose_jacobian(self):
        net = build_network((6,), ["FC 5", "FC 4", "FC+Softmax 3"], act="linear", seed=8)
        net.set_symmetric_feedback()
        rng = np.random.default_rng(9)
        net.forward(rng.standard_normal((3, 6)))
        for n in range(1, net.depth):
            v = rng.standard_normal(net.acts[n + 1].shape)
            assert np.max(np.abs(net.feedback_jvp(n, v) - net.jacobian_T_vjp(n, v))) < 1e-12

    @pytest.mark.parametrize("net", _nets())
    def test_weight_grad_is_gradient_of_pairing(self, net):
        rng = np.random.default_rng(10)
        for n in range(1, net.depth):
            g = net.feedback[n]
            a = rng.standard_normal((2, *g.source_shape))
            out_g = rng.standard_normal((2, *g.target_shape))
            analytic = g.weight_grad(a, out_g)
            w = g.weight
            idx = tuple(rng.integers(0, d) for d in w.shape)
            old = w[idx]
            w[idx] = old + 1e-6
            fp = np.sum(g.transform(a) * out_g)
            w[idx] = old - 1e-6
            fm = np.sum(g.transform(a) * out_g)
            w[idx] = old
            assert abs((fp - fm) / 2e-6 - analytic[idx]) < 1e-6


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_bit_exact_round_trip(self, tmp_path, dtype):
        net = build_network((3, 12, 12), SMALL, seed=1, dtype=dtype)
        other = build_network((3, 12, 12), SMALL, seed=2, dtype=dtype)
        path = tmp_path / "net.tprp"
        save_checkpoint(net, path)
        load_checkpoint(other, path)
        for a, b in zip(net.forward_params(), other.forward_params()):
            for k in a:
                assert a[k].tobytes() == b[k].tobytes()
        for a, b in zip(net.feedback_weights()[1:], other.feedback_weights()[1:]):
            assert a.tobytes() == b.tobytes()
        save_checkpoint(other, tmp_path / "again.tprp")
        assert path.read_bytes() == (tmp_path / "again.tprp").read_bytes()

    def test_header(self, tmp_path):
        net = build_network((4,), ["FC 3", "FC+Softmax 2"])
        path = tmp_path / "c.tprp"
        save_checkpoint(net, path)
        raw = path.read_bytes()
        assert raw[:4] == b"TPRP"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 3
        assert len(read_checkpoint(path)) == 3

    def test_bad_magic_and_mismatch(self, tmp_path):
        path = tmp_path / "c.tprp"
        path.write_bytes(b"XXXX" + b"\0" * 8)
        with pytest.raises(FormatError):
            read_checkpoint(path)
        save_checkpoint(build_network((4,), ["FC 3", "FC+Softmax 2"]), path)
        with pytest.raises(FormatError):
            load_checkpoint(build_network((4,), ["FC 5", "FC+Softmax 2"]), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_checkpoint(path)
