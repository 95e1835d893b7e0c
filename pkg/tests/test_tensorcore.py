import json
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gemfuse import tensorcore as tc
from gemfuse.errors import InvalidParameter, InvalidShape, NonFiniteError
from gemfuse.tensorcore import Tensor

from gradcases import TENSOR_OPS, TOL, check


class TestSoftmaxTemp:
    def test_symmetric_input(self):
        np.testing.assert_array_equal(tc.softmax_temp(Tensor([0.0, 0.0]), 0, 1.0).data, [0.5, 0.5])

    def test_two_logits(self):
        e = np.exp(1.0)
        out = tc.softmax_temp(Tensor([1.0, 0.0]), 0, 1.0).data
        np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)
        np.testing.assert_allclose(out, [0.7310585786300049, 0.2689414213699951], atol=1e-15)

    def test_high_temperature_flattens(self):
        out = tc.softmax_temp(Tensor([1.0, 0.0]), 0, 100.0).data
        assert np.all(np.abs(out - 0.5) < 0.003)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_rejects_non_positive_tau(self, tau):
        with pytest.raises(InvalidParameter):
            tc.softmax_temp(Tensor([1.0, 2.0]), 0, tau)

    def test_rejects_empty_axis(self):
        with pytest.raises(InvalidShape):
            tc.softmax_temp(Tensor(np.zeros((2, 0))), 1, 1.0)

    def test_rejects_bad_axis(self):
        with pytest.raises(InvalidParameter):
            tc.softmax_temp(Tensor([1.0]), 3, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-30, 30)),
        st.floats(-100, 100),
        st.floats(0.05, 10),
    )
    def test_normalized_and_shift_invariant(self, x, shift, tau):
        out = tc.softmax_temp(Tensor(x), -1, tau).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
        shifted = tc.softmax_temp(Tensor(x + shift), -1, tau).data
        np.testing.assert_allclose(shifted, out, atol=1e-12)


class TestStopGradient:
    def test_forward_identity(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        np.testing.assert_array_equal(tc.stop_gradient(x).data, [2.0, 3.0])

    def test_only_unstopped_factor_contributes(self):
        x = Tensor([2.0], requires_grad=True)
        (g,) = tc.backward(tc.sum_reduce(tc.stop_gradient(x) * x), [x])
        np.testing.assert_array_equal(g, [2.0])

    def test_fully_blocked(self):
        x = Tensor([1.0, 5.0, -2.0], requires_grad=True)
        (g,) = tc.backward(tc.sum_reduce(tc.stop_gradient(x)), [x])
        assert np.all(g == 0.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.integers(1, 5), elements=st.floats(-5, 5)))
    def test_stopped_path_exact_zero(self, data):
        x = Tensor(data, requires_grad=True)
        stopped = tc.exp(tc.stop_gradient(x) * 3.0)
        loss = tc.sum_reduce(stopped * 2.0)
        (g,) = tc.backward(loss, [x])
        assert np.all(g == 0.0)
        # but the forward loss does depend on x
        moved = tc.sum_reduce(tc.exp(tc.stop_gradient(Tensor(data + 0.5)) * 3.0) * 2.0)
        assert moved.item() != loss.item()


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        (g,) = tc.backward(tc.sum_reduce(x), [x])
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        (g,) = tc.backward(tc.sum_reduce(x * x), [x])
        np.testing.assert_array_equal(g, [6.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(InvalidParameter):
            tc.backward(x * 2.0)

    def test_unreachable_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([[1.0]], requires_grad=True)
        gx, gy = tc.backward(tc.sum_reduce(x), [x, y])
        np.testing.assert_array_equal(gy, [[0.0]])

    def test_diamond_accumulates(self):
        x = Tensor([1.5], requires_grad=True)
        a = x * 2.0
        loss = tc.sum_reduce(a * a + a)
        (g,) = tc.backward(loss, [x])
        np.testing.assert_allclose(g, [2 * (2 * 3.0) + 2])

    def test_sets_leaf_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tc.backward(tc.sum_reduce(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_graph_topology(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        graph = tc.backward(tc.sum_reduce(tc.relu(x) * x))
        ids = [n.node_id for n in graph.nodes]
        for pos, node in enumerate(graph.nodes):
            assert all(ids.index(i) < pos for i in node.inputs)
        assert len(set(ids)) == len(ids)
        doc = json.loads(graph.to_json())
        assert [d["op"] for d in doc] == ["leaf", "relu", "hadamard", "sum"]


class TestPrimitives:
    def test_hadamard(self):
        np.testing.assert_array_equal(tc.hadamard(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [3.0, 8.0])

    def test_concat_channels_layout(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 3, 4))
        out = tc.concat_channels(Tensor(a), Tensor(b)).data
        assert out.shape == (7, 3, 4)
        assert np.array_equal(out[:2], a)
        assert np.array_equal(out[2:], b)

    def test_concat_channels_spatial_mismatch(self):
        with pytest.raises(InvalidShape):
            tc.concat_channels(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 3))))

    def test_mean_reduce(self):
        assert tc.mean_reduce(Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShape):
            tc.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(InvalidShape):
            tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            tc.log(Tensor([0.0]))
        with pytest.raises(NonFiniteError):
            tc.div(Tensor([1.0]), Tensor([0.0]))

    def test_conv2d_matches_loop(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = tc.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 5, 6))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(6):
                        ref[n, o, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv2d_unbatched(self):
        rng = np.random.default_rng(4)
        x, w = rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
        batched = tc.conv2d(Tensor(x[None]), Tensor(w), padding=1).data[0]
        np.testing.assert_array_equal(tc.conv2d(Tensor(x), Tensor(w), padding=1).data, batched)

    def test_max_pool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(tc.max_pool2d(Tensor(x)).data, [[[[5, 7], [13, 15]]]])

    def test_forward_determinism(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
        outs = [tc.softmax_temp(tc.conv2d(Tensor(x), Tensor(w), padding=1), -1, 0.5).data for _ in range(2)]
        assert np.array_equal(outs[0], outs[1])


@pytest.mark.parametrize("name", sorted(TENSOR_OPS))
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(3):
        assert check(TENSOR_OPS[name], rng) < TOL
