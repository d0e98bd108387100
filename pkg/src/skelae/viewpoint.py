"""Synthetic viewpoints via Euler rotations, and the adversarial angle regressor.

Joint coordinates are treated as row vectors: a frame's (m, 3) joint matrix is
right-multiplied by the rotation, ``Z_t = X_t @ R``.  Each factor is the
right-handed, counter-clockwise-positive rotation about its axis written for
row vectors, i.e. the transpose of the usual column-vector matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict

import numpy as np

from .autodiff import Node, absolute, dense, grl, mean_all, relu, sigmoid
from .autodiff.init import fan_in_uniform
from .autodiff.node import ShapeError, as_node

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class EulerAngles:
    """Pitch (about x), yaw (about y) and roll (about z), radians in [0, 2*pi)."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(v) or not 0.0 <= v < TWO_PI:
                raise ValueError(f"{name}={v} outside [0, 2*pi)")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _ry(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def _rz(g):
    c, s = math.cos(g), math.sin(g)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(angles: EulerAngles) -> np.ndarray:
    """``R = Rx(alpha) @ Ry(beta) @ Rz(gamma)`` for row-vector right-multiplication."""
    return _rx(angles.alpha) @ _ry(angles.beta) @ _rz(angles.gamma)


def rotate_coords(x: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Rotate a (3, m, t) sequence or an (N, 3, m, t) batch."""
    if x.shape[-3] != 3:
        raise ShapeError(f"rotation needs 3 coordinates, got {x.shape[-3]}", dim="d")
    return np.einsum("...cjt,ck->...kjt", x, R)


def rotate_sequence(seq, R: np.ndarray):
    """Right-multiply every frame of ``seq`` by ``R``; label and metadata are kept."""
    coords = seq.coords
    if coords.shape[0] != 3:
        raise ShapeError(f"rotation needs d=3, got d={coords.shape[0]}", dim="d")
    if np.array_equal(R, np.eye(3)):
        return replace(seq, coords=coords.copy())
    return replace(seq, coords=rotate_coords(coords, R))


def sample_angles(rng: np.random.Generator) -> EulerAngles:
    a, b, g = rng.uniform(0.0, TWO_PI, size=3)
    return EulerAngles(float(a), float(b), float(g))


class SsviHead:
    """One-hidden-layer ReLU MLP with a 3-way sigmoid readout, behind gradient reversal."""

    def __init__(self, latent_dim: int, hidden: int = 128, lam: float = 1.0, seed: int = 0,
                 dtype=np.float64):
        if not lam > 0:
            raise ValueError("gradient reversal strength must be positive")
        rng = np.random.default_rng(seed)
        self.lam = lam
        self.hidden = hidden
        self.params: Dict[str, Node] = {
            "ssvi.hidden.weight": Node(fan_in_uniform(rng, (latent_dim, hidden), latent_dim, dtype), requires_grad=True),
            "ssvi.hidden.bias": Node(fan_in_uniform(rng, (hidden,), latent_dim, dtype), requires_grad=True),
            "ssvi.out.weight": Node(fan_in_uniform(rng, (hidden, 3), hidden, dtype), requires_grad=True),
            "ssvi.out.bias": Node(fan_in_uniform(rng, (3,), hidden, dtype), requires_grad=True),
        }

    def predict(self, z: Node, reverse: bool = True) -> Node:
        """Normalised angle predictions in (0, 1); gradients into ``z`` are reversed."""
        p = self.params
        h = grl(z, self.lam) if reverse else z
        h = relu(dense(h, p["ssvi.hidden.weight"], p["ssvi.hidden.bias"]))
        return sigmoid(dense(h, p["ssvi.out.weight"], p["ssvi.out.bias"]))


def normalized_targets(target, batch: int) -> np.ndarray:
    if isinstance(target, EulerAngles):
        target = target.as_array()
    t = np.asarray(target, dtype=float) / TWO_PI
    if t.shape == (3,):
        t = np.broadcast_to(t, (batch, 3))
    if t.shape != (batch, 3):
        raise ShapeError(f"angle targets of shape {t.shape} for batch {batch}", dim="N")
    return t


def _row_sum_mean(err: Node) -> Node:
    # sum over angles then mean over batch == 3 * mean over all entries
    return mean_all(err) * 3.0


def ssvi_loss(z: Node, target, head: SsviHead, reverse: bool = True) -> Node:
    """L1 regression loss of the rotation angles from the latent ``z``.

    ``target`` is one :class:`EulerAngles` shared by the batch or an (N, 3)
    array of radians.  Head parameters receive ordinary gradients; ``z``
    receives them negated and scaled by the head's ``lam``.
    """
    if z.value.ndim != 2 or z.shape[0] == 0:
        raise ShapeError(f"latent batch must be (N>0, F), got {z.shape}", dim="N")
    pred = head.predict(z, reverse=reverse)
    return _row_sum_mean(absolute(pred - as_node(normalized_targets(target, z.shape[0]), pred.dtype)))
