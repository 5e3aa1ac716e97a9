"""Adam with bias correction, constant learning rate."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def adam_step(params, state):
    """Apply one Adam update in place to every tensor in ``params``.

    ``params`` maps names to tensors whose ``grad`` is populated. Moments are
    kept in float64 regardless of parameter storage.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing)}")
    state.t += 1
    bc1 = 1 - state.beta1 ** state.t
    bc2 = 1 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        else:
            v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        if state.lr == 0:
            continue
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= step.astype(p.dtype)
    return params
