import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import (conv2d_loops, cumulative_layer_norm_ref, cumulative_norm_ref,
                      deconv2d_loops, dilated_conv1d_loops, instance_norm_ref,
                      max_relative_gradient_error, tensor64)
from reverb_t60.autodiff import (Adam, AdamState, Tensor, adam_step, clip_grad_norm, concat,
                                 conv2d, conv_transpose2d, cumulative_layer_norm,
                                 dilated_conv1d, glu_gate, glu_split, global_grad_norm,
                                 instance_norm, linear, load_checkpoint, no_grad, prelu,
                                 read_header, relu, save_checkpoint, sigmoid)
from reverb_t60.exceptions import InvalidArgumentError, TrainingDivergedError
from reverb_t60.models import ModelConfig, init_ne_net, tcn_unit

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


class TestForwardOracles:
    def test_conv2d_ladder_step(self, rng):
        y = conv2d(t64(rng.standard_normal((1, 1, 3, 161))), t64(rng.standard_normal((2, 1, 2, 5))))
        assert y.shape == (1, 2, 3, 79)

    def test_conv2d_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 6))
        w = np.eye(3).reshape(3, 3, 1, 1)
        y = conv2d(t64(x), t64(w), stride=(1, 1))
        np.testing.assert_allclose(y.data, x, atol=1e-15)

    def test_conv2d_brute_force(self, rng):
        x = rng.standard_normal((2, 4, 6, 10))
        w, b = rng.standard_normal((3, 4, 2, 3)), rng.standard_normal(3)
        y = conv2d(t64(x), t64(w), t64(b))
        np.testing.assert_allclose(y.data, conv2d_loops(x, w, b, 2), atol=1e-12)

    @pytest.mark.parametrize("f, kf, out", [(4, 3, 9), (79, 5, 161), (9, 3, 19)])
    def test_deconv_sizes(self, rng, f, kf, out):
        y = conv_transpose2d(t64(rng.standard_normal((1, 2, 3, f))),
                             t64(rng.standard_normal((2, 1, 2, kf))))
        assert y.shape == (1, 1, 3, out)

    def test_deconv_brute_force(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        w, b = rng.standard_normal((3, 2, 2, 3)), rng.standard_normal(2)
        y = conv_transpose2d(t64(x), t64(w), t64(b))
        np.testing.assert_allclose(y.data, deconv2d_loops(x, w, b, 2), atol=1e-12)

    def test_deconv_delta_reproduces_kernel(self, rng):
        w = rng.standard_normal((1, 1, 1, 3))
        x = np.zeros((1, 1, 1, 4))
        x[0, 0, 0, 2] = 1.0
        y = conv_transpose2d(t64(x), t64(w)).data[0, 0, 0]
        expected = np.zeros(9)
        expected[4:7] = w[0, 0, 0]
        np.testing.assert_allclose(y, expected)

    def test_adjoint_identity(self, rng):
        # single-frame kernels: the causal crop is then its own adjoint
        x = rng.standard_normal((2, 3, 4, 11))
        w = rng.standard_normal((5, 3, 1, 3))
        y = rng.standard_normal((2, 5, 4, 5))
        lhs = np.sum(conv2d(t64(x), t64(w)).data * y)
        rhs = np.sum(x * conv_transpose2d(t64(y), t64(w)).data)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_dilated_brute_force(self, rng):
        x = rng.standard_normal((2, 12, 3))
        w, b = rng.standard_normal((5, 3, 4)), rng.standard_normal(4)
        for d in (1, 2, 4):
            y = dilated_conv1d(t64(x), t64(w), t64(b), dilation=d)
            np.testing.assert_allclose(y.data, dilated_conv1d_loops(x, w, b, d), atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            conv2d(t64(np.zeros((1, 2, 3, 9))), t64(np.zeros((1, 3, 2, 3))))


class TestGlu:
    def test_zero_gate_halves(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_allclose(glu_gate(t64(a), t64(np.zeros((3, 4)))).data, a / 2)

    def test_saturation(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_allclose(glu_gate(t64(a), t64(np.full((3, 4), 50.0))).data, a,
                                   rtol=1e-12)

    def test_split_matches_gate(self, rng):
        y = rng.standard_normal((2, 6, 3))
        split = glu_split(t64(y), axis=1).data
        np.testing.assert_allclose(split, glu_gate(t64(y[:, :3]), t64(y[:, 3:])).data)

    def test_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            glu_gate(t64(np.zeros(3)), t64(np.zeros(4)))


class TestNorms:
    def test_instance_norm_reference(self, rng):
        x = rng.standard_normal((2, 3, 5, 7))
        np.testing.assert_allclose(instance_norm(t64(x)).data, instance_norm_ref(x), atol=1e-12)

    def test_moments(self, rng):
        x = 3 + 2 * rng.standard_normal((1, 2, 20, 30))
        y = instance_norm(t64(x)).data
        np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(2, 3)), 1, atol=1e-3)

    @given(st.floats(1.0, 100.0))
    @settings(max_examples=10, deadline=None)
    def test_scale_invariance(self, c):
        x = np.random.default_rng(0).standard_normal((1, 2, 4, 6))
        a, b = instance_norm(t64(x)).data, instance_norm(t64(c * x)).data
        np.testing.assert_allclose(a, b, atol=1e-4)

    def test_degenerate(self):
        with pytest.raises(InvalidArgumentError):
            instance_norm(t64(np.zeros((1, 1, 1, 1))))

    def test_cumulative_reference(self, rng):
        x = rng.standard_normal((2, 3, 6, 4))
        np.testing.assert_allclose(instance_norm(t64(x), causal=True).data,
                                   cumulative_norm_ref(x), atol=1e-10)

    def test_cumulative_layer_norm_reference(self, rng):
        x = rng.standard_normal((2, 7, 5))
        np.testing.assert_allclose(cumulative_layer_norm(t64(x)).data,
                                   cumulative_layer_norm_ref(x), atol=1e-10)

    def test_affine(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        g, b = np.array([2.0, 3.0]), np.array([1.0, -1.0])
        y = instance_norm(t64(x), t64(g), t64(b)).data
        np.testing.assert_allclose(y, instance_norm_ref(x) * g[:, None, None] + b[:, None, None],
                                   atol=1e-12)


class TestElementwise:
    def test_prelu(self):
        y = prelu(t64([[-1.0, 2.0]]), t64([0.25]), axis=0)
        np.testing.assert_allclose(y.data, [[-0.25, 2.0]])

    def test_relu(self):
        np.testing.assert_array_equal(relu(t64([-2.0, 0.0, 3.0])).data, [0, 0, 3])

    def test_sigmoid(self):
        np.testing.assert_allclose(sigmoid(t64([0.0, 1000.0, -1000.0])).data, [0.5, 1.0, 0.0])

    def test_linear_by_hand(self):
        x = t64([[1.0, 2.0]])
        W = t64([[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]])
        b = t64([0.5, 0.0, 0.0])
        # [1, 2] @ W = [5, 2, 0] plus bias
        np.testing.assert_allclose(linear(x, W, b).data, [[5.5, 2.0, 0.0]])


def _kinks_nudged(rng, *shape):
    a = rng.standard_normal(shape)
    a[np.abs(a) < 0.05] += 0.1
    return Tensor(a, requires_grad=True, dtype=F64)


class TestGradients:
    TOL = 1e-3

    def test_conv2d(self, rng):
        x, w, b = tensor64(rng, 2, 3, 4, 11), tensor64(rng, 5, 3, 2, 3), tensor64(rng, 5)
        assert max_relative_gradient_error(lambda: conv2d(x, w, b), [x, w, b], rng) < self.TOL

    def test_deconv2d(self, rng):
        x, w, b = tensor64(rng, 2, 3, 4, 5), tensor64(rng, 3, 5, 2, 3), tensor64(rng, 5)
        assert max_relative_gradient_error(lambda: conv_transpose2d(x, w, b), [x, w, b],
                                           rng) < self.TOL

    def test_glu(self, rng):
        a, b = tensor64(rng, 2, 3, 4), tensor64(rng, 2, 3, 4)
        assert max_relative_gradient_error(lambda: glu_gate(a, b), [a, b], rng) < 1e-4

    @pytest.mark.parametrize("causal", [False, True])
    def test_instance_norm(self, rng, causal):
        x, g, b = tensor64(rng, 2, 3, 4, 5), tensor64(rng, 3), tensor64(rng, 3)
        err = max_relative_gradient_error(lambda: instance_norm(x, g, b, causal=causal),
                                          [x, g, b], rng)
        assert err < self.TOL

    def test_cumulative_layer_norm(self, rng):
        x, g, b = tensor64(rng, 2, 6, 3), tensor64(rng, 3), tensor64(rng, 3)
        assert max_relative_gradient_error(lambda: cumulative_layer_norm(x, g, b), [x, g, b],
                                           rng) < self.TOL

    def test_prelu(self, rng):
        x, s = _kinks_nudged(rng, 2, 3, 4, 5), tensor64(rng, 3)
        assert max_relative_gradient_error(lambda: prelu(x, s), [x, s], rng) < self.TOL

    def test_linear(self, rng):
        x, W, b = tensor64(rng, 2, 3, 5), tensor64(rng, 5, 4), tensor64(rng, 4)
        assert max_relative_gradient_error(lambda: linear(x, W, b), [x, W, b], rng) < self.TOL

    def test_dilated_conv(self, rng):
        x, w, b = tensor64(rng, 2, 9, 3), tensor64(rng, 5, 3, 4), tensor64(rng, 4)
        assert max_relative_gradient_error(lambda: dilated_conv1d(x, w, b, dilation=2),
                                           [x, w, b], rng) < self.TOL

    def test_tcn_unit(self, rng):
        cfg = ModelConfig.from_preset("tiny")
        P = init_ne_net(cfg, seed=3, dtype=F64)
        prefix = "ne_net.tcn.group_1.unit_2"
        x = tensor64(rng, 1, 6, 8)
        names = [k for k in P if k.startswith(prefix)]
        for k in names:
            P[k].data += 0.1 * rng.standard_normal(P[k].shape)
        err = max_relative_gradient_error(lambda: tcn_unit(x, P, prefix, 2),
                                          [x] + [P[k] for k in names], rng)
        assert err < self.TOL


class TestBackward:
    def test_square(self):
        x = t64([3.0], grad=True)
        (x * x).sum().backward()
        assert x.grad[0] == pytest.approx(6.0)

    def test_second_call_raises(self):
        x = t64([3.0], grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(InvalidArgumentError):
            loss.backward()

    def test_non_scalar(self):
        x = t64([1.0, 2.0], grad=True)
        with pytest.raises(InvalidArgumentError):
            (x * 2.0).backward()

    def test_disconnected_zero(self):
        x, y = t64([1.0], grad=True), t64([5.0], grad=True)
        opt = Adam({"x": x, "y": y})
        opt.zero_grad()
        (x * 2.0).sum().backward()
        assert y.grad[0] == 0.0 and x.grad[0] == 2.0

    def test_shared_subexpression(self):
        x = t64([2.0], grad=True)
        y = x * x
        (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(16.0)

    def test_concat_grad(self, rng):
        a, b = tensor64(rng, 2, 3), tensor64(rng, 2, 2)
        assert max_relative_gradient_error(lambda: concat([a, b], axis=1) * 2.0, [a, b],
                                           rng) < 1e-6

    def test_no_grad_builds_no_graph(self):
        x = t64([1.0], grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad


class TestAdam:
    def test_first_step(self):
        p = t64([1.0], grad=True)
        adam_step({"p": p}, {"p": np.array([1.0])}, AdamState(), 0.001)
        assert p.data[0] == pytest.approx(1.0 - 0.001, abs=1e-8)

    def test_matches_reference_definition(self, rng):
        p = t64(rng.standard_normal(4), grad=True)
        ref = p.data.copy()
        m = v = np.zeros(4)
        state = AdamState()
        for k in range(1, 6):
            g = rng.standard_normal(4)
            adam_step({"p": p}, {"p": g}, state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)

    def test_zero_gradient_no_change(self):
        p = t64([1.5, -2.0], grad=True)
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_zero_lr_no_change(self):
        p = t64([1.5], grad=True)
        adam_step({"p": p}, {"p": np.ones(1)}, AdamState(), 0.0)
        assert p.data[0] == 1.5

    def test_nan_raises(self):
        p = t64([1.0], grad=True)
        with pytest.raises(TrainingDivergedError):
            adam_step({"p": p}, {"p": np.array([np.nan])}, AdamState(), 0.1)
        assert p.data[0] == 1.0

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            p = Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
            state = AdamState()
            for _ in range(100):
                adam_step({"p": p}, {"p": rng.standard_normal(5).astype(np.float32)}, state,
                          1e-3)
            return p.data
        np.testing.assert_array_equal(run(), run())

    def test_clip(self):
        p = t64([0.0, 0.0], grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([{"p": p}], 1.0) == pytest.approx(5.0)
        assert global_grad_norm([{"p": p}]) == pytest.approx(1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"a.w": Tensor(rng.standard_normal((2, 3))), "b": Tensor(rng.standard_normal(4))}
        save_checkpoint(tmp_path / "c.ckpt", params, {"k": 1}, "abc123", {"epoch": 2})
        back, header = load_checkpoint(tmp_path / "c.ckpt")
        assert list(back) == ["a.w", "b"] and header["config_hash"] == "abc123"
        for k in params:
            np.testing.assert_array_equal(back[k].data, params[k].data.astype(np.float32))
        assert read_header(tmp_path / "c.ckpt")["meta"] == {"epoch": 2}

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {"x": Tensor(np.array([1.0, 2.0]))})
        raw = (tmp_path / "c.ckpt").read_bytes()
        assert raw[:8] == b"RT60CKPT"
        size = int.from_bytes(raw[8:16], "little")
        np.testing.assert_array_equal(np.frombuffer(raw[16 + size:], "<f4"), [1.0, 2.0])

    def test_bad_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope")
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(tmp_path / "x")
