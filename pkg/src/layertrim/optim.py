"""Adam optimizer over named TensorNode parameters."""

from __future__ import annotations

import numpy as np

from .tensor import TensorNode


class OptimizerState:
    """Bias-corrected Adam moments, keyed by parameter name.

    Moment buffers are created lazily on the first step and stay
    shape-congruent with their parameters. The step counter increases by
    exactly one per adam_step call.
    """

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, TensorNode], state: OptimizerState) -> None:
    """One bias-corrected Adam update; updates values in place, clears grads.

    Every parameter must carry a populated gradient (a backward pass ran
    since the last step).
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: parameters without gradients: {sorted(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    mc = 1.0 / (1.0 - b1**t)
    vc = 1.0 / (1.0 - b2**t)
    for name, p in params.items():
        g = p.grad
        if g.shape != p.values.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.values.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= state.learning_rate * (m * mc) / (np.sqrt(v * vc) + state.epsilon)
        p.grad = None
