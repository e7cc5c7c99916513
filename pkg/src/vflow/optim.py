"""Adam with bias correction over named parameter mappings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, Tensor]) -> dict[str, Tensor]:
    """Apply one Adam update and return fresh parameter tensors.

    The state's moment buffers and step counter are advanced in place. A
    gradient containing NaN aborts the whole update before anything changes.
    """
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"no gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if np.isnan(g.data).any():
            raise NumericalError(f"NaN gradient for parameter {name!r}; update refused")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name].data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor._wrap((p.data - update).astype(p.dtype), name)
    return out
