"""Autodiff core: op semantics, broadcasting, graph mechanics."""

import numpy as np
import pytest

from drivevqa.tensor import (
    Tensor, ShapeError, NonFiniteError, no_grad, assert_finite,
    add, mul, matmul, tsum, tmean, tmax, concat, gather_rows,
    relu, sigmoid, softmax, texp, tlog, tsqrt,
)
from drivevqa.gradcheck import grad_check


def t(a, rg=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=rg, dtype=np.float64)


class TestBasics:
    def test_scalar_chain(self):
        x = t(3.0)
        y = x * x + 2.0 * x + 1.0      # (x+1)^2, dy/dx = 2x+2 = 8
        y.backward()
        assert y.item() == pytest.approx(16.0)
        assert x.grad == pytest.approx(8.0)

    def test_broadcast_add_grad(self):
        a = t(np.zeros((2, 3)))
        b = t(np.zeros(3))
        (a + b).sum().backward()
        assert a.grad.shape == (2, 3)
        assert b.grad.shape == (3,)
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])

    def test_matmul_batched(self):
        rng = np.random.default_rng(0)
        a = t(rng.standard_normal((4, 2, 3)))
        b = t(rng.standard_normal((3, 5)))
        out = matmul(a, b)
        assert out.shape == (4, 2, 5)
        out.sum().backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_max_routes_to_first_argmax(self):
        x = t([[1.0, 5.0, 5.0]])
        tmax(x, axis=1).sum().backward()
        np.testing.assert_allclose(x.grad, [[0.0, 1.0, 0.0]])

    def test_grad_accumulates_across_uses(self):
        x = t(2.0)
        (x * x + x).backward()         # d/dx = 2x + 1 = 5
        assert x.grad == pytest.approx(5.0)

    def test_no_grad_blocks_graph(self):
        x = t(1.0)
        with no_grad():
            y = x * 3.0
        assert y._parents == () and y._backward is None

    def test_intermediate_grads_freed(self):
        x = t(np.ones(4))
        y = x * 2.0
        z = y.sum()
        z.backward()
        assert y.grad is None          # freed during the sweep
        assert x.grad is not None

    def test_assert_finite(self):
        assert_finite(np.ones(3))
        with pytest.raises(NonFiniteError):
            assert_finite(np.array([1.0, np.nan]))

    def test_non_float_promoted(self):
        x = Tensor(np.arange(4))
        assert x.dtype == np.float32


class TestActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(t(0.0)).item() == pytest.approx(0.5)

    def test_sigmoid_extreme_no_overflow(self):
        out = sigmoid(t([-1e4, 1e4]))
        np.testing.assert_allclose(out.data, [0.0, 1.0])
        assert np.all(np.isfinite(out.data))

    def test_softmax_uniform(self):
        out = softmax(t([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3))

    def test_softmax_partition_and_positive(self):
        rng = np.random.default_rng(3)
        out = softmax(t(rng.standard_normal((4, 7)) * 10), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)
        assert np.all(out.data > 0)

    def test_softmax_empty_axis(self):
        with pytest.raises(ShapeError):
            softmax(t(np.zeros((2, 0))), axis=-1)

    def test_relu(self):
        x = t([-1.0, 0.0, 2.0])
        out = relu(x)
        np.testing.assert_allclose(out.data, [0.0, 0.0, 2.0])
        out.sum().backward()
        np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0])


class TestGather:
    def test_gather_rows_forward_backward(self):
        a = t(np.arange(24, dtype=np.float64).reshape(2, 4, 3))
        idx = np.array([[2, 0], [1, 1]])
        out = gather_rows(a, idx)
        np.testing.assert_allclose(out.data[0, 0], a.data[0, 2])
        out.sum().backward()
        # row (1,1) used twice -> grad 2
        assert a.grad[1, 1, 0] == pytest.approx(2.0)
        assert a.grad[0, 3].sum() == 0.0

    def test_gather_rank_check(self):
        with pytest.raises(ShapeError):
            gather_rows(t(np.zeros((2, 3))), np.zeros((2, 1), dtype=int))


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_core_ops(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    checks = [
        ("add", lambda x, y: x + y, [a, b]),
        ("mul", lambda x, y: x * y, [a, b]),
        ("matmul", lambda x, y: matmul(x, y), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        ("sum", lambda x: tsum(x, axis=1), [a]),
        ("mean", lambda x: tmean(x, axis=0), [a]),
        ("max", lambda x: tmax(x, axis=1), [a]),
        ("relu", relu, [a + 0.1]),       # nudge off the kink
        ("sigmoid", sigmoid, [a]),
        ("softmax", lambda x: softmax(x, axis=-1), [a]),
        ("exp", texp, [a]),
        ("log", tlog, [np.abs(a) + 0.5]),
        ("sqrt", tsqrt, [np.abs(a) + 0.5]),
        ("concat", lambda x, y: concat([x, y], axis=1), [a, b]),
        ("slice", lambda x: x[:, 1:3], [a]),
        ("transpose", lambda x: x.transpose(1, 0), [a]),
        ("reshape", lambda x: x.reshape(4, 3), [a]),
    ]
    for name, fn, inputs in checks:
        rep = grad_check(fn, inputs, tolerance=1e-6, name=name)
        assert rep.passed, repr(rep)
