import numpy as np
import pytest

from layertrim.optim import OptimizerState, adam_step
from layertrim.tensor import TensorNode


def _param(values):
    node = TensorNode(np.asarray(values, dtype=np.float64), requires_grad=True)
    return node


def test_zero_grad_leaves_params_unchanged():
    p = _param([1.0, -2.0])
    p.grad = np.zeros(2)
    adam_step({"p": p}, OptimizerState(learning_rate=0.1))
    assert np.array_equal(p.values, [1.0, -2.0])


def test_first_step_moves_by_learning_rate():
    p = _param([0.0])
    p.grad = np.ones(1)
    adam_step({"p": p}, OptimizerState(learning_rate=0.1))
    # bias-corrected first step is lr * g / (|g| + eps) ~= lr * sign(g)
    assert np.isclose(p.values[0], -0.1, atol=1e-6)


def test_identical_params_stay_identical():
    a = _param([0.5, 1.5])
    b = _param([0.5, 1.5])
    state = OptimizerState(learning_rate=0.01)
    for _ in range(5):
        a.grad = np.array([1.0, -2.0])
        b.grad = np.array([1.0, -2.0])
        adam_step({"a": a, "b": b}, state)
    assert np.array_equal(a.values, b.values)


def test_missing_grad_rejected():
    p = _param([1.0])
    with pytest.raises(ValueError, match="without gradients"):
        adam_step({"p": p}, OptimizerState())


def test_grads_cleared_and_step_counts():
    p = _param([1.0])
    state = OptimizerState()
    for expected in (1, 2, 3):
        p.grad = np.ones(1)
        adam_step({"p": p}, state)
        assert state.step == expected
        assert p.grad is None


def test_moments_shape_congruent():
    p = _param(np.zeros((3, 4)))
    state = OptimizerState()
    p.grad = np.ones((3, 4))
    adam_step({"p": p}, state)
    assert state.m["p"].shape == (3, 4)
    assert state.v["p"].shape == (3, 4)


def test_updates_are_in_place():
    arr = np.array([1.0, 2.0])
    p = TensorNode(arr, requires_grad=True)
    p.grad = np.ones(2)
    adam_step({"p": p}, OptimizerState(learning_rate=0.05))
    assert p.values is arr  # shared buffer mutated, not replaced
    assert not np.array_equal(arr, [1.0, 2.0])
