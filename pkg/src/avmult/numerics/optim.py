"""Adam with bias correction."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def init_adam_state(params):
    return {
        "step": 0,
        "m": [np.zeros(p.shape, dtype=p.data.dtype) for p in params],
        "v": [np.zeros(p.shape, dtype=p.data.dtype) for p in params],
    }


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Apply one Adam update in place; returns the mutated ``state``.

    ``params`` are tensors, ``grads`` are arrays (``None`` means zero
    gradient).  Moments are updated for every parameter so the step counter
    stays in lock-step with the bias correction.
    """
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ShapeError(f"adam: {len(params)} params, {len(grads)} grads, {len(state['m'])} moment buffers")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam moment shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"adam gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = init_adam_state(self.params)

    def step(self, lr=None):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
