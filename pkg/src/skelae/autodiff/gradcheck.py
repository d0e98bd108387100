"""Central finite differences against the analytic backward pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .node import Node, backward


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error; ``floor`` bounds the scale so vanishing gradients compare absolutely."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradients(build: Callable[[], Node], inputs: Sequence[Node], step: float = 1e-5,
                    floor: float = 1e-8) -> list:
    """Relative error per input between analytic and central-difference gradients.

    ``build`` must recompute the scalar loss from the current ``inputs`` values.
    """
    root = build()
    backward(root)
    analytic = [np.zeros_like(n.value) if n.grad is None else n.grad.copy() for n in inputs]
    errs = []
    for node, ga in zip(inputs, analytic):
        gn = numerical_grad(lambda: float(build().value), node.value, step)
        errs.append(rel_error(ga, gn, floor))
    return errs
