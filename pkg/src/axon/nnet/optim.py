"""Adam with bias correction over named parameter lists."""
from __future__ import annotations

import numpy as np

from ..voxcore import VoxError
from .layers import Module


class AdamState:
    def __init__(self, net: Module, learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in net.named_parameters()}
        self.v = {name: np.zeros_like(t.data) for name, t in net.named_parameters()}


def adam_step(net: Module, state: AdamState):
    """One update using the gradients stored on the parameters."""
    params = list(net.named_parameters())
    for name, t in params:
        if t.grad is None:
            raise VoxError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step_count
    bc2 = 1.0 - b2**state.step_count
    for name, t in params:
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
