"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one Adam update to ``params`` (name -> Tensor) and return the state.

    Parameters without a gradient entry (or with ``None``) are left untouched
    but still share the global step counter.
    """
    if lr <= 0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.data.shape or g.shape != p.data.shape:
            raise ShapeError(f"adam state/grad shape mismatch for {name}: {m.shape}, {g.shape} vs {p.data.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
        state.m[name] = m.astype(p.data.dtype, copy=False)
        state.v[name] = v.astype(p.data.dtype, copy=False)
    return state
