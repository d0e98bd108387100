"""Define-by-run reverse-mode differentiation on numpy arrays.

A :class:`Node` wraps an ``ndarray`` value together with the closure that maps
the gradient of its output to gradients of its parents.  The graph is rebuilt on
every forward pass; :func:`backward` walks it in reverse topological order and
accumulates gradients additively across fan-out.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# Set to False to skip the post-op finiteness scan (e.g. for throughput runs).
CHECK_FINITE = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension so callers can report it.
    """

    def __init__(self, message: str, dim: Optional[str] = None):
        super().__init__(message)
        self.dim = dim


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph.

    Attributes:
        value: the forward result.
        grad: accumulated gradient of the root w.r.t. ``value`` (or None).
        op: tag naming the primitive that produced the node.
        parents: predecessor nodes.
        requires_grad: whether gradients should be tracked for this node.
    """

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(DEFAULT_DTYPE)
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the primitives below
    def __add__(self, other):
        return add(self, as_node(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_node(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_node(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_node(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def leaf(value, requires_grad: bool = True, name: Optional[str] = None, dtype=None) -> Node:
    """Create a graph input (parameter or data)."""
    arr = np.array(value, dtype=dtype or DEFAULT_DTYPE)
    return Node(arr, requires_grad=requires_grad, name=name)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=dtype or DEFAULT_DTYPE), requires_grad=False)


def _make(value: np.ndarray, parents: Sequence[Node], backward_fn: BackwardFn, op: str) -> Node:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    req = any(p.requires_grad for p in parents)
    return Node(value, parents, backward_fn if req else None, op=op, requires_grad=req)


def _toposort(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, zero_grad: bool = True) -> dict:
    """Populate ``grad`` on every requires-grad ancestor of a scalar ``root``.

    Returns a mapping ``id(node) -> grad`` for convenience. Leaf gradients are
    reset first unless ``zero_grad`` is False, in which case they accumulate.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}", dim="root")
    order = _toposort(root)
    if zero_grad:
        for node in order:
            node.grad = None
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate across repeated backward calls when asked to
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return {id(n): n.grad for n in order}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a: Node, b: Node) -> Node:
    out = a.value + b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Node, b: Node) -> Node:
    out = a.value - b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def absolute(a: Node) -> Node:
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (np.sign(av) * g,), "abs")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Node) -> Node:
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return _make(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def reshape(a: Node, shape: Iterable[int]) -> Node:
    src = a.shape
    return _make(a.value.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Node) -> Node:
    """Collapse every axis after the first."""
    return reshape(a, (a.shape[0], -1))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align", dim="inner")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def dense(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (N, F_in)."""
    if x.value.ndim != 2:
        raise ShapeError(f"dense expects (N, F_in) input, got {x.shape}", dim="rank")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(
            f"dense input has {x.shape[1]} features but weight expects {weight.shape[0]}", dim="F_in"
        )
    xv, wv = x.value, weight.value
    out = xv @ wv
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ wv.T, xv.T @ g), "dense")
    if bias.shape != (wv.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({wv.shape[1]},)", dim="F_out")
    out = out + bias.value
    return _make(out, (x, weight, bias), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)), "dense")


def channel_bias(x: Node, bias: Node) -> Node:
    """Add a per-channel bias to an (N, C, H, W) map."""
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({x.shape[1]},)", dim="C")
    out = x.value + bias.value[None, :, None, None]
    return _make(out, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "channel_bias")


def grl(x: Node, lam: float = 1.0) -> Node:
    """Gradient reversal: identity forward, gradient scaled by ``-lam`` backward."""
    if not lam > 0:
        raise ValueError(f"gradient reversal strength must be positive, got {lam}")
    return _make(x.value, (x,), lambda g: (-lam * g,), "grl")


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} incompatible with labels {labels.shape}", dim="N")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), back, "softmax_xent")
