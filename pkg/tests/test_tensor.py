import numpy as np
import pytest

from algnet import ops
from algnet.tensor import (Parameter, Tensor, backward, finite_checks, get_default_dtype, get_tape, no_grad,
                           precision)


def test_default_dtype_and_precision_switch():
    assert get_default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0, 2.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_shape_matches_data_length():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.size == int(np.prod(t.shape)) == 24


def test_non_finite_forward_is_an_error():
    x = Tensor(np.array([1.0, 0.0]))
    with pytest.raises(FloatingPointError):
        ops.div(x, Tensor(np.array([1.0, 0.0])))
    with finite_checks(False):
        out = ops.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    assert np.isinf(out.data).all()


def test_parameter_grad_shape_and_zero_grad(rng):
    p = Parameter(rng.standard_normal((3, 4)))
    assert p.grad.shape == p.shape
    backward(ops.sum(ops.mul(p, p)))
    assert np.any(p.grad != 0)
    p.zero_grad()
    assert p.grad.shape == p.shape and not np.any(p.grad)


def test_sum_gives_ones():
    p = Parameter(np.arange(6.0).reshape(2, 3))
    backward(ops.sum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_half_square_gives_identity(f64, rng):
    p = Parameter(rng.standard_normal(5))
    backward(ops.div(ops.sum(ops.mul(p, p)), 2.0))
    np.testing.assert_allclose(p.grad, p.data, rtol=0, atol=1e-15)


def test_replay_is_reverse_execution_order():
    p = Parameter(np.ones(3))
    a = ops.exp(p)
    b = ops.relu(a)
    c = ops.square(b)
    backward(ops.sum(c))
    assert get_tape().last_replay == ["sum", "square", "relu", "exp"]


def test_graph_without_parameter_dependence():
    p = Parameter(np.ones(3))
    constant = Tensor(np.arange(3.0))
    backward(ops.sum(ops.square(constant)))
    assert not np.any(p.grad)


def test_grads_accumulate_until_cleared():
    p = Parameter(np.ones(2))
    backward(ops.sum(p))
    backward(ops.sum(p))
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])


def test_backward_requires_scalar():
    p = Parameter(np.ones(2))
    with pytest.raises(ValueError):
        backward(ops.mul(p, 2.0))


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2))
    with no_grad():
        ops.sum(ops.exp(p))
    assert len(get_tape()) == 0


def test_shared_subexpression_gradient(f64):
    # d/dp sum((p*p) + p*p) = 4p
    p = Parameter(np.array([1.5, -2.0]))
    q = ops.mul(p, p)
    backward(ops.sum(ops.add(q, q)))
    np.testing.assert_allclose(p.grad, 4 * p.data)


def test_assign_checks_shape():
    p = Parameter(np.zeros(3))
    with pytest.raises(ValueError):
        p.assign(np.zeros(4))
