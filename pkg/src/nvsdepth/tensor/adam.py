"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Update ``params`` in place.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero so moments still decay.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        dt = p.dtype.type
        m = dt(beta1) * m + dt(1.0 - beta1) * g
        v = dt(beta2) * v + dt(1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        if lr == 0.0:
            continue
        update = dt(lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(eps))
        p.data = (p.data - update).astype(p.dtype, copy=False)
