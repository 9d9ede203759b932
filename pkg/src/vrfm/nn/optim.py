from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import ShapeError

__all__ = ["AdamW", "OptimizerState", "adamw_step"]


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adamw_step(params, grads, state: OptimizerState):
    """One AdamW update, in place on ``params`` (name -> Parameter).

    Weight decay is decoupled: ``p <- p - lr * wd * p`` before the adaptive
    step. Parameters missing from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].value.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].value.shape}")

    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        value = p.value
        if state.weight_decay:
            value = value - state.lr * state.weight_decay * value
        p.value = value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a ParameterSet."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = {p.name: p for p in params}
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def step(self, grads):
        adamw_step(self.params, grads, self.state)
