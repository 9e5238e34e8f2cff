"""AdamW with decoupled weight decay and polynomial LR decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr0: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    power: float = 0.5
    max_iters: int = 1000
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def poly_lr(step: int, state: OptimizerState) -> float:
    frac = min(max(step, 0), state.max_iters) / state.max_iters
    return state.lr0 * (1.0 - frac) ** state.power


def adamw_step(params, grads=None, state: OptimizerState | None = None):
    """One in-place update over (name, Tensor) pairs.

    grads may be an explicit list of arrays matching params; when None the
    tensors' accumulated .grad buffers are used (missing grads count as
    zero, so decay still applies).
    """
    if state is None:
        raise ValueError("optimizer state required")
    lr = poly_lr(state.step, state)
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (name, p) in enumerate(params):
        g = grads[i] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=p.data.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * (mhat / (np.sqrt(vhat) + state.eps)
                        + state.weight_decay * p.data)
    state.step = t
    return state
