"""Per-channel batch normalization for NCHW maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .node import Node, ShapeError, _make

MOMENTUM = 0.1


@dataclass
class RunningStats:
    """Exponential moving averages of per-channel mean and (unbiased) variance."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, momentum: float = MOMENTUM) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batchnorm2d(
    x: Node,
    gamma: Node,
    beta: Node,
    stats: RunningStats,
    mode: str = "train",
    eps: float = 1e-5,
) -> Node:
    """Normalize each channel over (N, H, W), then scale by gamma and shift by beta.

    In ``train`` mode batch statistics are used and ``stats`` is updated in
    place (arrays are rebound, never mutated); ``eval`` mode reads ``stats``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {xv.shape}", dim="rank")
    c = xv.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)", dim="C")
    gv = gamma.value[None, :, None, None]
    bv = beta.value[None, :, None, None]

    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (xv - stats.mean[None, :, None, None]) * inv[None, :, None, None]
        out = gv * xhat + bv

        def back_eval(g):
            return (
                g * gv * inv[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return _make(out, (x, gamma, beta), back_eval, "batchnorm2d")
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    count = xv.shape[0] * xv.shape[2] * xv.shape[3]
    mean = xv.mean(axis=(0, 2, 3))
    centered = xv - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    out = gv * xhat + bv

    m = stats.momentum
    unbiased = var * (count / (count - 1)) if count > 1 else var
    stats.mean = (1 - m) * stats.mean + m * mean
    stats.var = (1 - m) * stats.var + m * unbiased

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gv
            gx = (inv[None, :, None, None] / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), back, "batchnorm2d")
