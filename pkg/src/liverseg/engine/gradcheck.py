"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import EngineError, Tensor, backward, no_grad

__all__ = ["grad_check"]


def grad_check(build: Callable[[], Tensor], tensors: Sequence[Tensor],
               eps: float = 1e-4, rng=None, max_coords: int = 24) -> float:
    """Compare analytic gradients against central differences.

    ``build`` reconstructs the scalar loss from the current contents of
    ``tensors`` (which it must close over); their data is perturbed in place
    and restored.  Checks up to ``max_coords`` randomly sampled coordinates
    per tensor and returns the worst relative error
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(0 if rng is None else rng)

    for t in tensors:
        if not t.requires_grad:
            raise EngineError("grad_check tensors must require gradients")
        t.grad = None
    loss = build()
    if loss.data.ndim != 0:
        raise EngineError("grad_check loss must be scalar")
    backward(loss)
    analytic = []
    for t in tensors:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())

    def value() -> float:
        with no_grad():
            v = float(build().data)
        if not np.isfinite(v):
            raise EngineError("non-finite loss during grad_check")
        return v

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        k = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
