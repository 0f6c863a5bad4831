"""Stochastic gradient descent with classical momentum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import EngineError, Tensor

__all__ = ["SgdState", "sgd_step", "SGD"]


@dataclass
class SgdState:
    """Step size, momentum coefficient, and per-parameter velocity buffers."""

    learning_rate: float
    momentum: float = 0.0
    velocities: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (self.learning_rate >= 0.0 and np.isfinite(self.learning_rate)):
            raise EngineError(f"learning rate must be finite and >= 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise EngineError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
             state: SgdState) -> None:
    """In-place update: v <- momentum*v + g; w <- w - lr*v."""
    if len(params) != len(grads):
        raise EngineError("one gradient per parameter required")
    if not state.velocities:
        state.velocities = [np.zeros_like(p.data) for p in params]
    if len(state.velocities) != len(params):
        raise EngineError("velocity buffers do not match parameter list")
    for p, g, v in zip(params, grads, state.velocities):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape or v.shape != p.data.shape:
            raise EngineError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if not np.isfinite(g).all():
            raise EngineError("non-finite gradient in sgd_step")
        v *= state.momentum
        v += g
        p.data -= state.learning_rate * v


class SGD:
    """Convenience wrapper tying a parameter list to an SgdState."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float,
                 momentum: float = 0.0):
        self.params = list(params)
        self.state = SgdState(learning_rate, momentum)

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    @learning_rate.setter
    def learning_rate(self, value: float) -> None:
        self.state.learning_rate = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        sgd_step(self.params, grads, self.state)
