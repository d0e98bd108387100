"""Skeletal adjacency, degree and Laplacian matrices, and the reconstruction-space regularizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .autodiff.node import Node, ShapeError, _make

# Kinect v2 bones, 0-based (spine base = 0, spine shoulder = 20).
NTU25_BONES: Tuple[Tuple[int, int], ...] = tuple(
    (a - 1, b - 1)
    for a, b in [
        (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
        (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
        (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
    ]
)

# Nine-joint stick figure used by the synthetic benchmark:
# 0 pelvis, 1 chest, 2 head, 3/4 left elbow/hand, 5/6 right elbow/hand, 7/8 left/right foot.
TOY9_BONES: Tuple[Tuple[int, int], ...] = ((0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7), (0, 8))

TOPOLOGIES = {
    "ntu25": (25, NTU25_BONES),
    "toy9": (9, TOY9_BONES),
    "path2": (2, ((0, 1),)),
    "path3": (3, ((0, 1), (1, 2))),
}

# (root joint, torso joint) per topology, used by normalization
TORSO = {"ntu25": (0, 20), "toy9": (0, 1), "path2": (0, 1), "path3": (0, 2)}


@dataclass(frozen=True)
class SkeletonGraph:
    m: int
    edges: Tuple[Tuple[int, int], ...]
    W: np.ndarray
    D: np.ndarray
    L: np.ndarray

    @property
    def bone_count(self) -> int:
        return len(self.edges)


def build_graph(m: int, edges: Iterable[Sequence[int]]) -> SkeletonGraph:
    """Unweighted skeletal graph: ``W[i, j] = 1`` iff joints i and j share a bone."""
    if m < 1:
        raise ValueError("joint count must be positive")
    W = np.zeros((m, m))
    canon = []
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < m and 0 <= j < m):
            raise ValueError(f"edge ({i}, {j}) out of range for {m} joints")
        if i == j:
            raise ValueError(f"self-loop at joint {i}")
        W[i, j] = W[j, i] = 1.0
        canon.append((min(i, j), max(i, j)))
    canon = tuple(sorted(set(canon)))
    D = np.diag(W.sum(axis=1))
    return SkeletonGraph(m=m, edges=canon, W=W, D=D, L=D - W)


def named_graph(name: str) -> SkeletonGraph:
    try:
        m, edges = TOPOLOGIES[name]
    except KeyError:
        raise KeyError(f"unknown topology {name!r}; known: {sorted(TOPOLOGIES)}") from None
    return build_graph(m, edges)


def laplacian_quadratic(z, L: np.ndarray) -> float:
    """``z^T L z``; half of the pairwise sum ``sum_ij W_ij (z_i - z_j)^2``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (L.shape[0],):
        raise ShapeError(f"vector of length {z.shape} does not match {L.shape[0]} joints", dim="m")
    return float(z @ L @ z)


def r_skel(xhat: Node, L: np.ndarray) -> Node:
    """Batch mean of the (time, axis) mean of ``x^T L x`` over joint vectors.

    ``xhat`` is a reconstruction batch of shape (N, d, m, t); each
    ``xhat[n, c, :, s]`` is one m-vector.
    """
    x = xhat.value
    if x.ndim != 4 or x.shape[2] != L.shape[0]:
        raise ShapeError(f"reconstruction {x.shape} does not have {L.shape[0]} joints on axis 2", dim="m")
    n, d, _, t = x.shape
    L = np.asarray(L, dtype=x.dtype)
    Lx = np.einsum("ij,ncjt->ncit", L, x)
    quad = (x * Lx).sum(axis=2)  # (N, d, t)
    value = np.asarray(quad.mean())
    denom = n * d * t
    sym = L + L.T

    def back(g):
        return (g * np.einsum("ij,ncjt->ncit", sym, x) / denom,)

    return _make(value, (xhat,), back, "r_skel")
