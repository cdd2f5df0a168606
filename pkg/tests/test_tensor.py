"""Tensor construction contracts and the backward pass on the op tape."""

import numpy as np
import pytest

from dff.errors import DimensionError, NumericError
from dff.tensor import (
    Graph,
    Tensor,
    add,
    backward,
    concat_channels,
    mul,
    reshape,
    set_finite_checks,
    tensor_sum,
)
from helpers import fd_grad, max_rel_err


class TestTensorBasics:
    def test_float64_and_scalar_shape(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert Tensor(5.0).shape == (1,)

    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_grad_buffer_iff_requires_grad(self):
        leaf = Tensor(np.ones(3), requires_grad=True)
        assert leaf.grad is not None and leaf.grad.shape == leaf.data.shape
        assert np.all(leaf.grad == 0)
        plain = Tensor(np.ones(3))
        assert plain.grad is None

    def test_binary_shape_mismatch(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((3, 2)))
        with pytest.raises(DimensionError):
            add(a, b)
        with pytest.raises(DimensionError):
            mul(a, b)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        backward(tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_square_sum_gives_x(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4,)), requires_grad=True)
        loss = mul(tensor_sum(mul(x, x)), 0.5)
        backward(loss)
        np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            backward(add(x, 1.0))

    def test_disconnected_leaf_keeps_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        backward(tensor_sum(x))
        np.testing.assert_array_equal(y.grad, np.zeros(3))

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tensor_sum(x)
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_backward_is_linear(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        a, b = 2.5, -1.25

        loss1 = tensor_sum(mul(x, x))
        loss2 = tensor_sum(mul(x, 3.0))
        x.zero_grad()
        backward(loss1)
        g1 = x.grad.copy()
        x.zero_grad()
        backward(loss2)
        g2 = x.grad.copy()

        x.zero_grad()
        combined = add(mul(tensor_sum(mul(x, x)), a), mul(tensor_sum(mul(x, 3.0)), b))
        backward(combined)
        assert np.abs(x.grad - (a * g1 + b * g2)).max() < 1e-10

    def test_diamond_reuse_accumulates_paths(self):
        # y = x*x used twice: d/dx sum(y + y) = 4x
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        y = mul(x, x)
        backward(tensor_sum(add(y, y)))
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_graph_trace_is_topological(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = mul(x, 2.0)
        z = add(y, y)
        loss = tensor_sum(z)
        graph = Graph.trace(loss)
        seen = set()
        for rec in graph.records:
            for parent in rec.inputs:
                if parent._record is not None:
                    assert id(parent._record) in seen
            seen.add(id(rec))
        assert len(graph.records) == len(seen)

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = add(y, 1.0)
        backward(tensor_sum(y))
        assert x.grad[0] == 1.0


class TestStructuralOps:
    def test_concat_channels_forward_and_grad(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        cat = concat_channels([a, b])
        assert cat.shape == (2, 3, 3, 3)
        np.testing.assert_array_equal(cat.data[:, :1], a.data)
        np.testing.assert_array_equal(cat.data[:, 1:], b.data)
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        backward(tensor_sum(mul(cat, w)))
        np.testing.assert_allclose(a.grad, w.data[:, :1])
        np.testing.assert_allclose(b.grad, w.data[:, 1:])

    def test_concat_requires_matching_spatial(self):
        a = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.ones((1, 1, 4, 4)))
        with pytest.raises(DimensionError):
            concat_channels([a, b])

    def test_reshape_grad(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 2, 1)))
        backward(tensor_sum(mul(reshape(x, (2, 3, 2, 1)), w)))
        np.testing.assert_allclose(x.grad, w.data.reshape(2, 6))

    def test_elementwise_grads_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

        def build():
            return tensor_sum(mul(add(mul(x, y), x), y))

        x.zero_grad()
        y.zero_grad()
        backward(build())
        for p in (x, y):
            num = fd_grad(lambda: build().item(), p.data)
            assert max_rel_err(p.grad, num) < 1e-8


class TestFiniteChecks:
    def test_disabled_by_default(self):
        x = Tensor(np.array([1e308]))
        with np.errstate(over="ignore"):
            assert mul(x, 10.0).data[0] == np.inf

    def test_checked_mode_raises(self):
        prev = set_finite_checks(True)
        try:
            x = Tensor(np.array([1e308]))
            with np.errstate(over="ignore"), pytest.raises(NumericError):
                mul(x, 10.0)
        finally:
            set_finite_checks(prev)
