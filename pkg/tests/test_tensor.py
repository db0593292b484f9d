import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amygseg.errors import ConfigError, DataError, NumericError, ShapeError
from amygseg.tensor import (
    ConvKernel,
    Graph,
    MomentumSGD,
    Tensor,
    conv3d,
    conv3d_backward,
    effective_extent,
    elementwise_add,
    finite_difference_check,
    relu,
    softmax_cross_entropy,
    zero_insert_kernel,
)

from conftest import rand_tensor


def make_kernel(out_ch, in_ch, k, seed=0, dilation=1, dtype=np.float32, bias=True):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((out_ch, in_ch, k, k, k)).astype(dtype))
    b = Tensor(rng.standard_normal(out_ch).astype(dtype)) if bias else Tensor.zeros((out_ch,), dtype)
    return ConvKernel(w, b, dilation=dilation)


def conv3d_reference(x, w, b, dilation):
    """Independent direct-loop convolution used as a correctness oracle."""
    out_ch, in_ch, k = w.shape[0], w.shape[1], w.shape[2]
    dd, hh, ww = x.shape[1:]
    eff = k + (k - 1) * (dilation - 1)
    lo = (eff - 1) // 2
    out = np.zeros((out_ch, dd, hh, ww), dtype=np.float64)
    for o in range(out_ch):
        for z in range(dd):
            for y in range(hh):
                for xx in range(ww):
                    acc = 0.0
                    for i in range(in_ch):
                        for kz in range(k):
                            for ky in range(k):
                                for kx in range(k):
                                    zz = z + kz * dilation - lo
                                    yy = y + ky * dilation - lo
                                    xs = xx + kx * dilation - lo
                                    if 0 <= zz < dd and 0 <= yy < hh and 0 <= xs < ww:
                                        acc += float(w[o, i, kz, ky, kx]) * float(
                                            x[i, zz, yy, xs]
                                        )
                    out[o, z, y, xx] = acc + float(b[o])
    return out


class TestConv3d:
    def test_identity_kernel_returns_input(self):
        x = rand_tensor((3, 4, 4, 4), seed=1)
        w = np.zeros((3, 3, 1, 1, 1), dtype=np.float32)
        for i in range(3):
            w[i, i, 0, 0, 0] = 1.0
        y = conv3d(x, ConvKernel(Tensor(w), Tensor.zeros((3,))))
        assert np.array_equal(y.data, x.data)

    def test_all_ones_center_is_27(self):
        x = Tensor(np.ones((1, 5, 5, 5), dtype=np.float32))
        k = ConvKernel(Tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32)), Tensor.zeros((1,)))
        y = conv3d(x, k)
        assert y.data[0, 2, 2, 2] == 27.0

    def test_matches_direct_loop_reference(self):
        x = rand_tensor((2, 5, 5, 5), seed=3, dtype=np.float64)
        k = make_kernel(3, 2, 3, seed=4, dilation=2, dtype=np.float64)
        got = conv3d(x, k).data
        want = conv3d_reference(x.data, k.weights.data, k.bias.data, 2)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("dilation", [1, 2, 4, 8])
    def test_dilated_equals_zero_inserted_bit_exact(self, dilation):
        # oracle: explicitly build the zero-inserted kernel, convolve at d=1
        x = rand_tensor((2, 8, 8, 8), seed=dilation)
        k = make_kernel(3, 2, 3, seed=10 + dilation, dilation=dilation)
        y_dilated = conv3d(x, k)
        y_inserted = conv3d(x, zero_insert_kernel(k))
        assert np.array_equal(y_dilated.data, y_inserted.data)

    @pytest.mark.parametrize("k", [1, 2, 3])
    @pytest.mark.parametrize("dilation", [1, 2, 4, 8])
    def test_same_padding_preserves_shape(self, k, dilation):
        x = rand_tensor((2, 6, 7, 5), seed=k)
        kern = make_kernel(4, 2, k, seed=k * 10 + dilation, dilation=dilation)
        assert conv3d(x, kern).shape == (4, 6, 7, 5)

    def test_channel_mismatch_names_both_shapes(self):
        x = rand_tensor((3, 4, 4, 4))
        k = make_kernel(2, 5, 3)
        with pytest.raises(ShapeError) as err:
            conv3d(x, k)
        assert "(3, 4, 4, 4)" in str(err.value) and "(2, 5, 3, 3, 3)" in str(err.value)

    def test_stride_not_one_rejected(self):
        x = rand_tensor((2, 4, 4, 4))
        k = make_kernel(2, 2, 3)
        with pytest.raises(ConfigError):
            conv3d(x, ConvKernel(k.weights, k.bias, stride=2))

    def test_forward_is_deterministic(self):
        x = rand_tensor((4, 6, 6, 6), seed=9)
        k = make_kernel(4, 4, 3, seed=9, dilation=2)
        a = conv3d(x, k)
        b = conv3d(x, k)
        assert np.array_equal(a.data, b.data)

    def test_effective_extent_invariant(self):
        assert ConvKernel(
            Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32)),
            Tensor.zeros((1,)),
            dilation=4,
        ).effective_extent == 3 + 2 * 3


class TestConv3dBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        x = rand_tensor((2, 4, 4, 4), seed=0)
        k = make_kernel(3, 2, 3, seed=1)
        gx, gw, gb = conv3d_backward(Tensor.zeros((3, 4, 4, 4)), x, k)
        assert not gx.data.any() and not gw.data.any() and not gb.data.any()

    def test_scalar_product_rule(self):
        # 1-voxel input x, 1x1x1 kernel w: output xw, so dx = w and dw = x
        x = Tensor(np.full((1, 1, 1, 1), 3.0, dtype=np.float32))
        w = Tensor(np.full((1, 1, 1, 1, 1), 5.0, dtype=np.float32))
        k = ConvKernel(w, Tensor.zeros((1,)))
        gx, gw, gb = conv3d_backward(Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)), x, k)
        assert gx.data.item() == 5.0
        assert gw.data.item() == 3.0
        assert gb.data.item() == 1.0

    def test_gradients_match_finite_differences(self):
        # scalarize with a fixed random projection; check sampled coordinates
        rng = np.random.default_rng(7)
        x = rand_tensor((2, 4, 4, 4), seed=7, dtype=np.float64)
        k = make_kernel(2, 2, 3, seed=8, dilation=2, dtype=np.float64)
        proj = rng.standard_normal((2, 4, 4, 4))
        eps = 1e-5

        def loss():
            return float((conv3d(x, k).data * proj).sum())

        gx, gw, gb = conv3d_backward(Tensor(proj), x, k)
        worst = 0.0
        for arr, grad in ((x.data, gx.data), (k.weights.data, gw.data), (k.bias.data, gb.data)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in rng.choice(flat.size, size=min(10, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + eps
                lp = loss()
                flat[idx] = orig - eps
                lm = loss()
                flat[idx] = orig
                numeric = (lp - lm) / (2 * eps)
                rel = abs(numeric - gflat[idx]) / max(abs(numeric), abs(gflat[idx]), 1e-8)
                worst = max(worst, rel)
        assert worst < 1e-4

    def test_grad_out_shape_mismatch_rejected(self):
        x = rand_tensor((2, 4, 4, 4))
        k = make_kernel(3, 2, 3)
        with pytest.raises(ShapeError):
            conv3d_backward(Tensor.zeros((3, 5, 4, 4)), x, k)


class TestElementwiseAdd:
    def test_add_zeros_is_identity(self):
        a = rand_tensor((3, 4, 4, 4), seed=2)
        out = elementwise_add(a, Tensor.zeros(a.shape))
        assert np.array_equal(out.data, a.data)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_commutative(self, seed):
        r = np.random.default_rng(seed)
        a = Tensor(r.standard_normal((2, 3, 3, 3)).astype(np.float32))
        b = Tensor(r.standard_normal((2, 3, 3, 3)).astype(np.float32))
        assert np.array_equal(elementwise_add(a, b).data, elementwise_add(b, a).data)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            elementwise_add(Tensor.zeros((2, 3, 3, 3)), Tensor.zeros((2, 3, 3, 4)))

    def test_backward_routes_grad_unchanged_to_both(self):
        g = Graph()
        b = g.parameter(rand_tensor((1, 2, 2, 2), seed=4), "b")
        c = g.parameter(rand_tensor((1, 2, 2, 2), seed=5), "c")
        s = g.add(b, c)
        g.softmax_cross_entropy(s, np.zeros((2, 2, 2), dtype=np.int64))
        g.backward()
        assert np.array_equal(b.grad, s.grad)
        assert np.array_equal(c.grad, s.grad)


class TestRelu:
    def test_all_negative_becomes_zero(self):
        x = Tensor(-np.abs(np.random.default_rng(0).standard_normal((2, 3, 3, 3))).astype(np.float32))
        assert not relu(x).data.any()

    def test_all_positive_is_identity(self):
        x = Tensor(np.abs(np.random.default_rng(0).standard_normal((2, 3, 3, 3))).astype(np.float32) + 0.1)
        assert np.array_equal(relu(x).data, x.data)

    def test_gradient_masks_negative_side(self):
        # finite differences away from zero: gradient 1 where x>0, 0 where x<0
        vals = np.array([-2.0, -0.5, 0.5, 2.0], dtype=np.float64).reshape(1, 1, 1, 4)
        g = Graph()
        x = g.parameter(Tensor(vals), "x")
        y = g.relu(x)
        labels = np.zeros((1, 1, 4), dtype=np.int64)
        g.softmax_cross_entropy(y, labels)
        g.backward()
        analytic = x.grad.copy()
        eps = 1e-6
        flat = x.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            g.recompute()
            lp = float(g.output.value)
            flat[i] = orig - eps
            g.recompute()
            lm = float(g.output.value)
            flat[i] = orig
            numeric = (lp - lm) / (2 * eps)
            assert abs(numeric - analytic.reshape(-1)[i]) < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_is_log_num_classes(self):
        logits = Tensor.zeros((11, 2, 2, 2))
        labels = np.zeros((2, 2, 2), dtype=np.int64)
        assert softmax_cross_entropy(logits, labels) == pytest.approx(np.log(11), rel=1e-6)

    def test_large_margin_saturates_to_zero(self):
        logits = np.zeros((11, 2, 2, 2), dtype=np.float32)
        logits[3] = 50.0
        labels = np.full((2, 2, 2), 3, dtype=np.int64)
        assert softmax_cross_entropy(Tensor(logits), labels) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        g = Graph()
        logits = g.parameter(Tensor(rng.standard_normal((11, 2, 2, 2))), "logits")
        labels = rng.integers(0, 11, size=(2, 2, 2))
        g.softmax_cross_entropy(logits, labels)
        assert finite_difference_check(g, logits, eps=1e-6, max_entries=24) < 1e-4

    def test_label_out_of_range_names_voxel(self):
        logits = Tensor.zeros((11, 2, 2, 2))
        labels = np.zeros((2, 2, 2), dtype=np.int64)
        labels[1, 0, 1] = 11
        with pytest.raises(DataError) as err:
            softmax_cross_entropy(logits, labels)
        assert "(1, 0, 1)" in str(err.value)

    def test_label_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            softmax_cross_entropy(Tensor.zeros((11, 2, 2, 2)), np.zeros((2, 2), dtype=np.int64))


class TestMomentumSGD:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = {"w": Tensor(np.full((3,), 2.0, dtype=np.float32))}
        opt = MomentumSGD(lr=0.1, momentum=0.9)
        opt.step(p, {"w": np.zeros(3, dtype=np.float32)})
        assert np.array_equal(p["w"].data, np.full(3, 2.0, dtype=np.float32))

    def test_single_step_definition(self):
        p = {"w": Tensor(np.array([1.0], dtype=np.float32))}
        MomentumSGD(lr=0.1, momentum=0.0).step(p, {"w": np.array([0.5], dtype=np.float32)})
        assert p["w"].data[0] == pytest.approx(0.95)

    def test_two_steps_momentum_unrolls_to_1_9g(self):
        # v1 = g, v2 = 0.9 g + g = 1.9 g (recurrence unrolled by hand)
        opt = MomentumSGD(lr=0.1, momentum=0.9)
        p = {"w": Tensor(np.array([1.0], dtype=np.float32))}
        g = np.array([0.5], dtype=np.float32)
        opt.step(p, {"w": g})
        opt.step(p, {"w": g})
        assert opt.velocities["w"][0] == pytest.approx(1.9 * 0.5, rel=1e-6)
        assert p["w"].data[0] == pytest.approx(1.0 - 0.1 * 0.5 - 0.1 * 1.9 * 0.5, rel=1e-6)

    def test_non_finite_gradient_names_parameter(self):
        opt = MomentumSGD(lr=0.1)
        p = {"bad.w": Tensor(np.ones(2, dtype=np.float32))}
        with pytest.raises(NumericError) as err:
            opt.step(p, {"bad.w": np.array([1.0, np.nan], dtype=np.float32)})
        assert "bad.w" in str(err.value)

    def test_invalid_hyperparameters_rejected(self):
        with pytest.raises(ConfigError):
            MomentumSGD(lr=0.0)
        with pytest.raises(ConfigError):
            MomentumSGD(lr=0.1, momentum=1.0)


class TestFiniteDifferenceCheck:
    def _linear_graph(self):
        # loss = sum_i w_i * x_i via a 1x1x1 conv reducing 4 channels to 1 voxel
        g = Graph()
        x = g.tensor_input(Tensor(np.arange(1.0, 5.0).reshape(4, 1, 1, 1)), "x")
        w = g.parameter(Tensor(np.full((1, 4, 1, 1, 1), 0.5, dtype=np.float64)), "w")
        b = g.parameter(Tensor.zeros((1,), np.float64), "b")
        g.conv3d(x, w, b)
        return g, w

    def test_linear_graph_error_is_machine_epsilon_scale(self):
        g, w = self._linear_graph()
        assert finite_difference_check(g, w, eps=1e-6) < 1e-9

    def test_zero_eps_rejected(self):
        g, w = self._linear_graph()
        with pytest.raises(ConfigError):
            finite_difference_check(g, w, eps=0.0)

    def test_non_scalar_output_rejected(self):
        g = Graph()
        w = g.parameter(Tensor(np.ones((2, 1, 1, 1), dtype=np.float64)), "w")
        g.relu(w)
        with pytest.raises(ShapeError):
            finite_difference_check(g, w, eps=1e-6)

    def test_float32_graph_rejected(self):
        g = Graph()
        w = g.parameter(Tensor(np.ones((2, 1, 1, 1), dtype=np.float32)), "w")
        labels = np.zeros((1, 1, 1), dtype=np.int64)
        g.softmax_cross_entropy(g.relu(w), labels)
        with pytest.raises(ConfigError):
            finite_difference_check(g, w, eps=1e-6)


class TestGraph:
    def test_nodes_reference_earlier_nodes_only(self):
        g = Graph()
        a = g.parameter(rand_tensor((2, 2, 2, 2), seed=1), "a")
        b = g.relu(a)
        c = g.add(a, b)
        g.softmax_cross_entropy(c, np.zeros((2, 2, 2), dtype=np.int64))
        for node in g.nodes:
            assert all(i < node.index for i in node.inputs)

    def test_recompute_sees_parameter_updates(self):
        g = Graph()
        w = g.parameter(Tensor(np.ones((2, 1, 1, 1), dtype=np.float64)), "w")
        g.softmax_cross_entropy(w, np.zeros((1, 1, 1), dtype=np.int64))
        before = float(g.output.value)
        w.value[1] += 3.0
        g.recompute()
        assert float(g.output.value) != before

    def test_backward_grad_shapes_match_parameters(self):
        g = Graph()
        x = g.tensor_input(rand_tensor((2, 3, 3, 3), seed=1))
        w = g.parameter(rand_tensor((4, 2, 3, 3, 3), seed=2), "w")
        b = g.parameter(Tensor.zeros((4,)), "b")
        out = g.conv3d(x, w, b, dilation=2)
        g.softmax_cross_entropy(out, np.zeros((3, 3, 3), dtype=np.int64))
        g.backward()
        assert w.grad.shape == w.value.shape
        assert b.grad.shape == b.value.shape
        assert x.grad is None  # leaf inputs do not need gradients


def test_effective_extent_formula():
    assert effective_extent(3, 2) == 5
    assert effective_extent(3, 4) == 9
    with pytest.raises(ConfigError):
        effective_extent(0, 1)
