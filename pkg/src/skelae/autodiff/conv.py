"""2-D convolution, transposed convolution, and max pool/unpool primitives.

Layout is NCHW throughout.  Kernels are (C_out, C_in, kh, kw) for
:func:`conv2d` and (C_in, C_out, kh, kw) for :func:`deconv2d`, so a
deconvolution with kernel ``K`` is exactly the input-adjoint of a convolution
with the same ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .node import Node, ShapeError, _make


def _pair(v) -> tuple:
    if np.isscalar(v):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


def _out_extent(size: int, k: int, stride: int, pad: int, dim: str) -> int:
    padded = size + 2 * pad
    if padded < k:
        raise ShapeError(f"padded {dim} extent {padded} is smaller than kernel extent {k}", dim=dim)
    return (padded - k) // stride + 1


def _check_conv_args(x: np.ndarray, k: np.ndarray, stride, padding, in_axis: int):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}", dim="rank")
    if k.ndim != 4:
        raise ShapeError(f"expected 4-d kernel, got shape {k.shape}", dim="rank")
    if x.shape[1] != k.shape[in_axis]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {k.shape[in_axis]}", dim="C_in"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh <= 0 or sw <= 0:
        raise ValueError(f"stride must be positive, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ValueError(f"padding must be non-negative, got {(ph, pw)}")
    return (sh, sw), (ph, pw)


def _nhwc_padded(x: np.ndarray, padding) -> np.ndarray:
    """Zero-padded channels-last copy, so each kernel tap is a contiguous-row slice."""
    ph, pw = padding
    n, c, h, w = x.shape
    xh = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xh[:, ph : ph + h, pw : pw + w, :] = x.transpose(0, 2, 3, 1)
    return xh


def _tap(i: int, j: int, ho: int, wo: int, stride) -> tuple:
    sh, sw = stride
    return (slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw), slice(None))


# All three kernels below accumulate one matmul per kernel tap over a
# channels-last layout; the kernel slices are made contiguous so BLAS is used.


def conv_forward(x: np.ndarray, k: np.ndarray, stride, padding) -> np.ndarray:
    o, c, kh, kw = k.shape
    n = x.shape[0]
    ho = _out_extent(x.shape[2], kh, stride[0], padding[0], "H")
    wo = _out_extent(x.shape[3], kw, stride[1], padding[1], "W")
    xh = _nhwc_padded(x, padding)
    out = np.zeros((n * ho * wo, o), dtype=np.result_type(x, k))
    for i in range(kh):
        for j in range(kw):
            patch = xh[_tap(i, j, ho, wo, stride)].reshape(-1, c)
            out += patch @ np.ascontiguousarray(k[:, :, i, j].T)
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv_input_grad(g: np.ndarray, k: np.ndarray, x_shape: tuple, stride, padding) -> np.ndarray:
    """Adjoint of :func:`conv_forward` w.r.t. its input."""
    ph, pw = padding
    o, c, kh, kw = k.shape
    n, _, h, w = x_shape
    ho, wo = g.shape[2:]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dx = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=np.result_type(g, k))
    for i in range(kh):
        for j in range(kw):
            dx[_tap(i, j, ho, wo, stride)] += (g2 @ np.ascontiguousarray(k[:, :, i, j])).reshape(n, ho, wo, c)
    return np.ascontiguousarray(dx[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2))


def conv_kernel_grad(x: np.ndarray, g: np.ndarray, k_shape: tuple, stride, padding) -> np.ndarray:
    """Adjoint of :func:`conv_forward` w.r.t. its kernel."""
    o, c, kh, kw = k_shape
    ho, wo = g.shape[2:]
    xh = _nhwc_padded(x, padding)
    g2t = g.transpose(1, 0, 2, 3).reshape(o, -1)
    gk = np.empty(k_shape, dtype=np.result_type(x, g))
    for i in range(kh):
        for j in range(kw):
            gk[:, :, i, j] = g2t @ xh[_tap(i, j, ho, wo, stride)].reshape(-1, c)
    return gk


def conv2d(x: Node, kernel: Node, stride=1, padding=0) -> Node:
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``kernel`` (C_out, C_in, kh, kw).

    Output extents follow ``(H + 2*pad - kh) // stride + 1``.
    """
    stride, padding = _check_conv_args(x.value, kernel.value, stride, padding, in_axis=1)
    kh, kw = kernel.shape[2:]
    _out_extent(x.shape[2], kh, stride[0], padding[0], "H")
    _out_extent(x.shape[3], kw, stride[1], padding[1], "W")
    xv, kv = x.value, kernel.value
    out = conv_forward(xv, kv, stride, padding)

    def back(g):
        gx = conv_input_grad(g, kv, xv.shape, stride, padding) if x.requires_grad else None
        gk = conv_kernel_grad(xv, g, kv.shape, stride, padding) if kernel.requires_grad else None
        return gx, gk

    return _make(out, (x, kernel), back, "conv2d")


def deconv_output_shape(in_shape: tuple, k_shape: tuple, stride, padding) -> tuple:
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    n, _, h, w = in_shape
    ho = (h - 1) * sh - 2 * ph + k_shape[2]
    wo = (w - 1) * sw - 2 * pw + k_shape[3]
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"transposed convolution output would be {(ho, wo)}", dim="H" if ho <= 0 else "W")
    return (n, k_shape[1], ho, wo)


def deconv2d(x: Node, kernel: Node, stride=1, padding=0) -> Node:
    """Transposed convolution of ``x`` (N, C_in, H, W) with ``kernel`` (C_in, C_out, kh, kw).

    Output extents are ``(H - 1) * stride - 2 * pad + kh``, the inverse of the
    :func:`conv2d` extent formula.
    """
    stride, padding = _check_conv_args(x.value, kernel.value, stride, padding, in_axis=0)
    xv, kv = x.value, kernel.value
    out_shape = deconv_output_shape(xv.shape, kv.shape, stride, padding)
    out = conv_input_grad(xv, kv, out_shape, stride, padding)

    def back(g):
        gx = conv_forward(g, kv, stride, padding) if x.requires_grad else None
        gk = conv_kernel_grad(g, xv, kv.shape, stride, padding) if kernel.requires_grad else None
        return gx, gk

    return _make(out, (x, kernel), back, "deconv2d")


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class IndexMap:
    """Argmax locations of a max pool.

    ``flat`` has the pooled shape (N, C, H', W') and holds, per output cell,
    the row-major index into the (H, W) plane of the *pre-pool* input.
    ``in_shape`` is that input's shape (after any fit padding).
    """

    flat: np.ndarray
    in_shape: tuple


def maxpool2d(x: Node, window, pad_to_fit: bool = False) -> tuple:
    """Non-overlapping max pool with stride equal to ``window``.

    Ties resolve to the lowest flat index.  Extents that ``window`` does not
    divide raise unless ``pad_to_fit`` requests right/bottom zero padding.
    """
    ph, pw = _pair(window)
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {xv.shape}", dim="rank")
    n, c, h, w = xv.shape
    if ph > h or pw > w:
        raise ShapeError(f"pool window {(ph, pw)} larger than input extents {(h, w)}", dim="H" if ph > h else "W")
    rh, rw = (-h) % ph, (-w) % pw
    if rh or rw:
        if not pad_to_fit:
            bad = "H" if rh else "W"
            raise ShapeError(f"pool window {(ph, pw)} does not divide extents {(h, w)}", dim=bad)
        xv = np.pad(xv, ((0, 0), (0, 0), (0, rh), (0, rw)))
    hp, wp = h + rh, w + rw
    ho, wo = hp // ph, wp // pw
    blocks = xv.reshape(n, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
    local = blocks.argmax(axis=-1)  # first occurrence wins
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * ph + local // pw
    cols = np.arange(wo)[None, :] * pw + local % pw
    flat = rows * wp + cols
    index = IndexMap(flat=flat, in_shape=(n, c, hp, wp))
    in_shape = x.shape

    def back(g):
        gx = np.zeros((n, c, hp * wp), dtype=g.dtype)
        np.put_along_axis(gx, flat.reshape(n, c, -1), g.reshape(n, c, -1), axis=-1)
        return (gx.reshape(n, c, hp, wp)[:, :, :h, :w].reshape(in_shape),)

    return _make(out, (x,), back, "maxpool2d"), index


def maxunpool2d(x: Node, indices: IndexMap, out_shape: tuple = None) -> Node:
    """Scatter pooled values back to their argmax locations, zeros elsewhere.

    ``out_shape`` defaults to the recorded pre-pool shape; a smaller (H, W)
    crops away fit padding.
    """
    n, c, hp, wp = indices.in_shape
    if out_shape is None:
        out_shape = (n, c, hp, wp)
    out_shape = tuple(out_shape)
    if x.shape != indices.flat.shape:
        raise ShapeError(f"unpool input {x.shape} does not match index map {indices.flat.shape}", dim="pooled")
    if out_shape[:2] != (n, c) or out_shape[2] > hp or out_shape[3] > wp:
        raise ShapeError(f"out_shape {out_shape} incompatible with index map over {indices.in_shape}", dim="out_shape")
    flat = indices.flat.reshape(n, c, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= hp * wp):
        raise IndexError("unpool index out of range")
    oh, ow = out_shape[2:]
    buf = np.zeros((n, c, hp * wp), dtype=x.dtype)
    np.put_along_axis(buf, flat, x.value.reshape(n, c, -1), axis=-1)
    out = buf.reshape(n, c, hp, wp)[:, :, :oh, :ow]
    pooled_shape = x.shape

    def back(g):
        gp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        gp[:, :, :oh, :ow] = g
        return (np.take_along_axis(gp.reshape(n, c, -1), flat, axis=-1).reshape(pooled_shape),)

    return _make(np.ascontiguousarray(out), (x,), back, "maxunpool2d")
