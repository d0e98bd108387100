"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .node import Node, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter update counts; a parameter without a gradient is skipped
    # entirely, so its bias correction must not advance either
    t: Dict[str, int] = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
) -> Dict[str, np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place.

    Entries whose gradient is missing (None or absent) pass through untouched.
    """
    b1, b2 = state.beta1, state.beta2
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}", dim=name)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        t = state.t.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        state.m[name], state.v[name], state.t[name] = m, v, t
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    state.steps += 1
    return new


class Adam:
    """Optimizer over a name -> :class:`Node` parameter table.

    Parameter arrays are rebound, never mutated, so graphs that captured the
    old values stay valid for a second backward pass.
    """

    def __init__(self, params: Mapping[str, Node], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 state: AdamState = None):
        self.params = dict(params)
        self.state = state if state is not None else AdamState(lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = {k: p.value for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        for k, v in adam_step(values, grads, self.state).items():
            self.params[k].value = v
