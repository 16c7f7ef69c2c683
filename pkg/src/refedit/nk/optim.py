"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from refedit.nk.tensor import ShapeError


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0


def adamw_step(params, grads, state):
    """Apply one AdamW update in place.

    ``params`` and ``grads`` are parallel mappings name -> ndarray (a missing or
    None gradient skips that parameter). Returns ``(params, state)``.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr = state.learning_rate
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


class AdamW:
    """Optimizer over a dict of named leaf Tensors."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.state = OptimizerState(lr, betas[0], betas[1], eps, weight_decay)

    def step(self):
        arrays = {n: t.data for n, t in self.params.items()}
        grads = {n: t._grad for n, t in self.params.items() if t._grad is not None}
        adamw_step(arrays, grads, self.state)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()
