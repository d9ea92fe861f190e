"""Gradient correctness against the central-difference oracle."""

import numpy as np
import pytest

import gradcheck
from speechbridge import tensor as T


@pytest.mark.parametrize("op", sorted(gradcheck.OP_CASES))
def test_op_matches_finite_differences(op):
    for seed in range(5):
        gradcheck.run_op_case(op, seed=1000 + seed)


def test_gradient_accumulates_across_backward_calls():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    first = x.grad.copy()
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * first)
    x.zero_grad()
    assert not x.grad.any()


def test_frozen_leaf_receives_no_gradient():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((3, 4)))  # frozen
    loss = T.sum_all(T.matmul(x, w))
    T.backward(loss)
    assert w.grad is None
    assert x.grad.any()


def test_freeze_drops_buffer_and_unfreeze_restores_it():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    x.freeze()
    assert x.grad is None and not x.requires_grad
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    assert x.grad is None
    x.unfreeze()
    assert x.grad.shape == x.shape


def test_no_grad_suppresses_recording():
    tape = T.active_tape()
    assert len(tape) == 0
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        y = T.relu(T.mul(x, x))
    assert len(tape) == 0
    assert y._node is None
    # and a tracked loss built outside resumes recording
    loss = T.sum_all(T.mul(x, x))
    assert len(tape) == 2
    T.backward(loss)
    assert len(tape) == 0


def test_backward_clears_tape_and_requires_scalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.mul(x, x)
    with pytest.raises(T.GradientError):
        T.backward(y)
    T.active_tape().clear()
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    assert len(T.active_tape()) == 0


def test_backward_on_untracked_scalar_is_a_noop():
    z = T.Tensor(np.asarray(3.0))
    T.backward(z)  # nothing reachable, nothing raised


def test_tape_nodes_follow_execution_order():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    a = T.relu(x)
    b = T.mul(a, a)
    c = T.sum_all(b)
    outs = [n.output for n in T.active_tape().nodes]
    assert outs == [a, b, c]
    T.backward(c)


def test_accumulation_when_tensor_used_twice_in_one_op():
    x = T.Tensor(np.asarray([[2.0]]), requires_grad=True)
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    np.testing.assert_allclose(x.grad, [[4.0]])


def test_float32_tensors_flow_through():
    T.set_default_dtype(np.float32)
    try:
        x = T.Tensor(np.ones((2, 3)), requires_grad=True)
        w = T.Tensor(np.ones((3, 2)), requires_grad=True)
        assert x.dtype == np.float32
        loss = T.sum_all(T.matmul(x, w))
        T.backward(loss)
        assert x.grad.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
