import numpy as np
import pytest

from percsal import tensor_core as tc
from percsal.tensor_core import CompGraph, GraphError, ShapeError, Tensor

from oracles import (batchnorm_ref, central_difference, conv2d_ref, linear_ref,
                     maxpool2_ref, relative_error)


class TestTensor:
    def test_shape_and_flat_data(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        np.testing.assert_array_equal(t.data, [1.0, 2.0, 3.0, 4.0])

    def test_data_length_must_match_shape(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0, 3.0], shape=(2, 2))

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.array[0] = 5.0

    def test_finite_ops_stay_finite(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 6, 6)))
        w = Tensor(rng.normal(size=(3, 4, 3, 3)))
        b = Tensor(rng.normal(size=3))
        out = tc.maxpool2(tc.relu(tc.conv2d(x, w, b, pad=1)))
        assert np.all(np.isfinite(out.array))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 5, 5)))
        w = Tensor([[[[1.0]]]])
        out = tc.conv2d(x, w, Tensor([0.0]))
        np.testing.assert_array_equal(out.array, x.array)

    def test_all_ones_counting(self):
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = tc.conv2d(x, w, Tensor([0.0]), pad=1)
        assert out.array[0, 1, 1] == 9.0
        assert out.array[0, 0, 0] == 4.0

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = tc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=0)
        np.testing.assert_allclose(out.array, conv2d_ref(x, w, b), atol=1e-12)

    def test_stride_and_pad_against_oracle(self):
        rng = np.random.default_rng(3)
        for stride, pad, hw in ((1, 1, 6), (2, 1, 7), (2, 0, 7), (3, 2, 8)):
            x = rng.normal(size=(2, hw, hw))
            w = rng.normal(size=(2, 2, 3, 3))
            b = rng.normal(size=2)
            if (hw + 2 * pad - 3) % stride:
                continue
            out = tc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
            np.testing.assert_allclose(out.array, conv2d_ref(x, w, b, stride, pad),
                                       atol=1e-12)

    def test_rejects_bad_shapes(self):
        x = Tensor(np.zeros((2, 4, 4)))
        with pytest.raises(ShapeError):
            tc.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor([0.0]))
        with pytest.raises(ShapeError):
            tc.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor([0.0]))  # even kernel
        with pytest.raises(ShapeError):
            tc.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor([0.0, 0.0]))

    def test_rejects_non_integral_output(self):
        x = Tensor(np.zeros((1, 6, 6)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError):
            tc.conv2d(x, w, Tensor([0.0]), stride=2, pad=0)


class TestRelu:
    def test_values(self):
        out = tc.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.array, [0.0, 0.0, 2.0])

    def test_gradient_is_positivity_indicator(self):
        g = CompGraph()
        x = g.leaf([-1.0, 2.0])
        grads = g.backward(tc.tsum(tc.relu(x)))
        np.testing.assert_array_equal(grads[x.node_id].array, [0.0, 1.0])

    def test_subgradient_at_zero_is_zero(self):
        g = CompGraph()
        x = g.leaf([0.0])
        grads = g.backward(tc.tsum(tc.relu(x)))
        assert grads[x.node_id].array[0] == 0.0

    def test_finite_difference_gradient(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=12)
        x = x[np.abs(x) > 1e-3]  # keep clear of the kink

        def f(v):
            return float(np.maximum(v, 0.0).sum())

        g = CompGraph()
        xt = g.leaf(x)
        grads = g.backward(tc.tsum(tc.relu(xt)))
        an = grads[xt.node_id].array
        for i in range(len(x)):
            fd = central_difference(f, x, i)
            assert relative_error(fd, an[i]) < 1e-6


class TestMaxpool2:
    def test_single_window(self):
        out = tc.maxpool2(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(out.array, [[[4.0]]])

    def test_constant_input_ties_route_top_left(self):
        g = CompGraph()
        x = g.leaf(np.ones((1, 4, 4)))
        out = tc.maxpool2(x)
        np.testing.assert_array_equal(out.array, np.ones((1, 2, 2)))
        grads = g.backward(tc.tsum(out))
        expected = np.zeros((1, 4, 4))
        expected[0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(grads[x.node_id].array, expected)

    def test_matches_oracle_on_random_input(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 4, 4))
        out = tc.maxpool2(Tensor(x))
        np.testing.assert_allclose(out.array, maxpool2_ref(x), atol=1e-12)

    def test_rejects_odd_extent(self):
        with pytest.raises(ShapeError):
            tc.maxpool2(Tensor(np.zeros((1, 3, 4))))


class TestBatchnormEval:
    def test_identity_parameters(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 3))
        eps = 1e-5
        out = tc.batchnorm_eval(Tensor(x), Tensor([0.0, 0.0]),
                                Tensor([1.0 - eps, 1.0 - eps]),
                                Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=eps)
        np.testing.assert_allclose(out.array, x, atol=1e-12)

    def test_zero_gamma_gives_constant_beta_and_zero_gradient(self):
        g = CompGraph()
        x = g.leaf(np.random.default_rng(7).normal(size=(1, 2, 2)))
        out = tc.batchnorm_eval(x, Tensor([0.0]), Tensor([1.0]),
                                Tensor([0.0]), Tensor([3.0]))
        np.testing.assert_allclose(out.array, np.full((1, 2, 2), 3.0))
        grads = g.backward(tc.tsum(out))
        np.testing.assert_array_equal(grads[x.node_id].array, np.zeros((1, 2, 2)))

    def test_matches_reference_and_finite_differences(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 4, 4))
        mean, var = rng.normal(size=3), rng.random(3) + 0.1
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        out = tc.batchnorm_eval(Tensor(x), Tensor(mean), Tensor(var),
                                Tensor(gamma), Tensor(beta))
        np.testing.assert_allclose(out.array, batchnorm_ref(x, mean, var, gamma, beta),
                                   atol=1e-12)

        def f(v):
            return float(batchnorm_ref(v, mean, var, gamma, beta).sum())

        g = CompGraph()
        xt = g.leaf(x)
        grads = g.backward(tc.tsum(tc.batchnorm_eval(xt, Tensor(mean), Tensor(var),
                                                     Tensor(gamma), Tensor(beta))))
        an = grads[xt.node_id].array.reshape(-1)
        for i in range(0, x.size, 7):
            assert relative_error(central_difference(f, x, i), an[i]) < 1e-6

    def test_rejects_negative_variance(self):
        with pytest.raises(ShapeError):
            tc.batchnorm_eval(Tensor(np.zeros((1, 2, 2))), Tensor([0.0]),
                              Tensor([-1.0]), Tensor([1.0]), Tensor([0.0]))


class TestLinear:
    def test_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        out = tc.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.array, x.array)

    def test_small_example(self):
        out = tc.linear(Tensor([2.0, 3.0]), Tensor([[1.0, 1.0]]), Tensor([-1.0]))
        np.testing.assert_array_equal(out.array, [4.0])

    def test_matches_oracle(self):
        rng = np.random.default_rng(9)
        x, w, b = rng.normal(size=6), rng.normal(size=(4, 6)), rng.normal(size=4)
        out = tc.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.array, linear_ref(x, w, b), atol=1e-12)

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(ShapeError):
            tc.linear(Tensor([1.0, 2.0]), Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        g = CompGraph()
        x = g.leaf(np.arange(6.0).reshape(2, 3))
        grads = g.backward(tc.tsum(x))
        np.testing.assert_array_equal(grads[x.node_id].array, np.ones((2, 3)))

    def test_squared_norm_gradient_is_2x(self):
        g = CompGraph()
        xv = np.array([1.0, -2.0, 3.0])
        x = g.leaf(xv)
        grads = g.backward(tc.tsum(tc.mul(x, x)))
        np.testing.assert_allclose(grads[x.node_id].array, 2 * xv)

    def test_rejects_non_scalar_seed(self):
        g = CompGraph()
        x = g.leaf([1.0, 2.0])
        with pytest.raises(GraphError):
            g.backward(x)

    def test_rejects_mixed_graphs(self):
        g1, g2 = CompGraph(), CompGraph()
        a = g1.leaf([1.0])
        b = g2.leaf([2.0])
        with pytest.raises(GraphError):
            tc.add(a, b)

    def test_parents_precede_children(self):
        g = CompGraph()
        x = g.leaf([1.0, 2.0])
        y = tc.relu(x)
        z = tc.tsum(tc.mul(y, y))
        for nid, node in enumerate(g.nodes):
            assert all(p < nid for p in node.parents)
        grads = g.backward(z)
        for nid in (x.node_id, y.node_id):
            assert grads[nid].shape == g.nodes[nid].output.shape

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(10)
        xv = rng.normal(size=8)
        a, b = 2.5, -1.25

        def grads_of(builder):
            g = CompGraph()
            x = g.leaf(xv)
            return g.backward(builder(x, g))[x.node_id].array

        def f(x, g):
            return tc.tsum(tc.mul(x, x))

        def h(x, g):
            return tc.tsum(tc.relu(x))

        def combo(x, g):
            return tc.add(tc.mul(f(x, g), a), tc.mul(h(x, g), b))

        np.testing.assert_allclose(grads_of(combo),
                                   a * grads_of(f) + b * grads_of(h), rtol=1e-15)

    def test_composed_graph_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 6, 6))
        w = rng.normal(size=(2, 2, 3, 3)) * 0.5
        b = rng.normal(size=2) * 0.1
        wl = rng.normal(size=(3, 18)) * 0.3
        bl = rng.normal(size=3) * 0.1

        def activation_pattern(v):
            return conv2d_ref(v, w, b, 1, 1) > 0

        def scalar(v):
            h = np.maximum(conv2d_ref(v, w, b, 1, 1), 0.0)
            out = linear_ref(maxpool2_ref(h).reshape(-1), wl, bl)
            return float((out * out).sum())

        g = CompGraph()
        xt = g.leaf(x)
        h = tc.maxpool2(tc.relu(tc.conv2d(xt, Tensor(w), Tensor(b), pad=1)))
        out = tc.linear(h.flatten(), Tensor(wl), Tensor(bl))
        grads = g.backward(tc.tsum(tc.mul(out, out)))
        an = grads[xt.node_id].array.reshape(-1)
        rng2 = np.random.default_rng(12)
        checked = 0
        for _ in range(30):
            i = int(rng2.integers(x.size))
            xp, xm = np.array(x), np.array(x)
            xp.reshape(-1)[i] += 1e-5
            xm.reshape(-1)[i] -= 1e-5
            if not np.array_equal(activation_pattern(xp), activation_pattern(xm)):
                continue  # the step crosses a ReLU kink; excluded by contract
            fd = central_difference(scalar, x, i)
            assert relative_error(fd, an[i]) < 1e-4, \
                f"coordinate {i}: fd={fd} analytic={an[i]}"
            checked += 1
        assert checked >= 10


class TestWeightGradients:
    def test_conv_weight_and_bias_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 7, 7))
        w = rng.normal(size=(2, 2, 3, 3)) * 0.5
        b = rng.normal(size=2) * 0.1

        g = CompGraph()
        wt = g.leaf(w)
        bt = g.leaf(b)
        out = tc.conv2d(Tensor(x), wt, bt, stride=2, pad=1)
        grads = g.backward(tc.tsum(tc.mul(out, out)))

        def f_w(v):
            o = conv2d_ref(x, v, b, 2, 1)
            return float((o * o).sum())

        def f_b(v):
            o = conv2d_ref(x, w, v, 2, 1)
            return float((o * o).sum())

        an_w = grads[wt.node_id].array.reshape(-1)
        for i in range(0, w.size, 5):
            assert relative_error(central_difference(f_w, w, i), an_w[i]) < 1e-6
        an_b = grads[bt.node_id].array
        for i in range(b.size):
            assert relative_error(central_difference(f_b, b, i), an_b[i]) < 1e-6

    def test_linear_weight_gradients(self):
        rng = np.random.default_rng(14)
        x, w, b = rng.normal(size=5), rng.normal(size=(3, 5)), rng.normal(size=3)
        g = CompGraph()
        wt, bt = g.leaf(w), g.leaf(b)
        out = tc.linear(Tensor(x), wt, bt)
        grads = g.backward(tc.tsum(tc.mul(out, out)))

        def f_w(v):
            o = linear_ref(x, v, b)
            return float((o * o).sum())

        an = grads[wt.node_id].array.reshape(-1)
        for i in range(w.size):
            assert relative_error(central_difference(f_w, w, i), an[i]) < 1e-6


class TestPickMaxChannel:
    def test_pick_gradient_scatter(self):
        g = CompGraph()
        x = g.leaf([3.0, 5.0, 1.0])
        grads = g.backward(tc.pick(x, 1))
        np.testing.assert_array_equal(grads[x.node_id].array, [0.0, 1.0, 0.0])

    def test_max_all_first_occurrence(self):
        g = CompGraph()
        x = g.leaf([[2.0, 7.0], [7.0, 1.0]])
        out = tc.max_all(x)
        assert out.item() == 7.0
        grads = g.backward(out)
        np.testing.assert_array_equal(grads[x.node_id].array, [[0.0, 1.0], [0.0, 0.0]])

    def test_channel_max(self):
        arr = np.array([[[1.0, 4.0], [2.0, 0.0]], [[5.0, 5.0], [0.0, 0.0]]])
        g = CompGraph()
        x = g.leaf(arr)
        out = tc.channel_max(x)
        np.testing.assert_array_equal(out.array, [4.0, 5.0])
        grads = g.backward(tc.tsum(out))
        expected = np.zeros_like(arr)
        expected[0, 0, 1] = 1.0
        expected[1, 0, 0] = 1.0  # first occurrence on the tie
        np.testing.assert_array_equal(grads[x.node_id].array, expected)


class TestLosses:
    def test_softmax_cross_entropy_matches_manual(self):
        logits = np.array([1.0, -0.5, 2.0])
        g = CompGraph()
        lt = g.leaf(logits)
        loss = tc.softmax_cross_entropy(lt, 2)
        z = np.exp(logits - logits.max())
        p = z / z.sum()
        np.testing.assert_allclose(loss.item(), -np.log(p[2]), rtol=1e-12)
        grads = g.backward(loss)
        expected = p.copy()
        expected[2] -= 1.0
        np.testing.assert_allclose(grads[lt.node_id].array, expected, rtol=1e-12)

    def test_sigmoid_cross_entropy_gradient(self):
        rng = np.random.default_rng(15)
        s = rng.normal(size=4)
        t = np.array([1.0, 0.0, 1.0, 0.0])

        def f(v):
            return float(np.mean(np.maximum(v, 0) - v * t + np.log1p(np.exp(-np.abs(v)))))

        g = CompGraph()
        st = g.leaf(s)
        grads = g.backward(tc.sigmoid_cross_entropy(st, t))
        an = grads[st.node_id].array
        for i in range(4):
            assert relative_error(central_difference(f, s, i), an[i]) < 1e-6
