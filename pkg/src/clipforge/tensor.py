"""Minimal reverse-mode autodiff engine on dense numpy arrays.

Covers exactly the operations a small pre-norm transformer dual encoder
needs: matmul, elementwise arithmetic with trailing-shape broadcast, gelu,
embedding lookup, reshape/axis swap, reductions, layer norm, softmax,
softmax cross entropy, masked mean pooling and L2 normalization.

Arrays are float32 by default. Ops preserve the dtype of their inputs, so
a graph built from float64 leaves runs end to end in float64 (used by the
gradient-check suite); all production paths construct float32 tensors.

Broadcasting is restricted: in binary ops the second operand's shape must
equal a trailing suffix of the first operand's shape. Anything else needs
an explicit reshape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, GraphError

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A dense n-dimensional array with an optional gradient.

    Leaf tensors are created directly from data; op results carry a
    backward rule and references to their parent tensors, forming an
    implicit computation graph rooted at the final output.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=np.float32,
        _parents: tuple = (),
        _backward: Optional[Callable] = None,
        op: str = "leaf",
    ):
        if isinstance(data, np.ndarray) and _parents:
            self.data = data  # op results are already materialized
        else:
            self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swap_axes(self, a: int, b: int):
        return swap_axes(self, a, b)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_(self, axis)


def _result(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(
        np.asarray(data),  # reductions yield numpy scalars; keep their dtype
        requires_grad=req,
        _parents=tuple(parents),
        _backward=backward_fn if req else None,
        op=op,
    )


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    """b must match a trailing suffix of a's shape (leading-batch broadcast)."""
    if b.ndim > a.ndim or (b.ndim and a.shape[a.ndim - b.ndim :] != b.shape):
        raise DimensionError(f"{op}: shape {b.shape} is not a trailing suffix of {a.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the leading axes that were broadcast away."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return g, _reduce_to(g, b.shape)

    return _result(out, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return _result(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * np.asarray(s, dtype=a.dtype)

    def bwd(g):
        return (g * np.asarray(s, dtype=a.dtype),)

    return _result(out, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either both operands share identical leading batch
    dims, or b is a plain 2-D matrix applied along a's last axis."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree between {a.shape} and {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data

        def bwd(g):
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _result(out, (a, b), bwd, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions disagree between {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _result(out, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), bwd, "reshape")


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = a.data.swapaxes(ax1, ax2)

    def bwd(g):
        return (g.swapaxes(ax1, ax2),)

    return _result(out, (a,), bwd, "swap_axes")


def narrow_rows(a: Tensor, n: int) -> Tensor:
    """First n rows along axis 0 (used to slice position embeddings)."""
    if n > a.shape[0]:
        raise DimensionError(f"narrow_rows: {n} rows requested from shape {a.shape}")
    out = a.data[:n]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:n] = g
        return (full,)

    return _result(out, (a,), bwd, "narrow_rows")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * local,)

    return _result(out, (a,), bwd, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _result(out, (a,), bwd, "exp")


def clamp_max(a: Tensor, bound: float) -> Tensor:
    """min(a, bound); gradient passes only through unclamped entries."""
    mask = a.data <= bound
    out = np.where(mask, a.data, np.asarray(bound, dtype=a.dtype))

    def bwd(g):
        return (g * mask.astype(a.dtype),)

    return _result(out, (a,), bwd, "clamp_max")


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(out, (a,), bwd, "sum")


def mean_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        gb = g / np.asarray(n, dtype=a.dtype)
        if axis is None:
            return (np.broadcast_to(gb, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(gb, axis), a.shape).copy(),)

    return _result(out, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# neural net blocks
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...]]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range for table with {table.shape[0]} rows "
            f"(got min {ids.min()}, max {ids.max()})"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), bwd, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        # standard fused layernorm backward
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), bwd, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Row softmax along the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), bwd, "softmax")


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(row)[target]."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, m = logits.shape
    if targets.shape != (n,):
        raise DimensionError(
            f"softmax_cross_entropy: {n} logit rows but {targets.shape} targets"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= m):
        raise IndexError(f"softmax_cross_entropy: target out of range [0, {m})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def bwd(g):
        p = e / denom
        p[rows, targets] -= 1.0
        return (p * (g / np.asarray(n, dtype=logits.dtype)),)

    return _result(out, (logits,), bwd, "softmax_cross_entropy")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x[b, t, :] over positions t where mask[b, t] is nonzero."""
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise DimensionError(f"masked_mean: mask {mask.shape} does not match {x.shape}")
    m = np.asarray(mask, dtype=x.dtype)
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise DimensionError("masked_mean: a row has no valid positions")
    out = (x.data * m[:, :, None]).sum(axis=1) / counts[:, None]

    def bwd(g):
        return ((g[:, None, :] / counts[:, None, None]) * m[:, :, None],)

    return _result(out, (x,), bwd, "masked_mean")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit L2 norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, np.asarray(eps, dtype=x.dtype))
    out = x.data / norm

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _result(out, (x,), bwd, "l2_normalize")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list:
    """Topologically ordered node list: every parent precedes its consumer."""
    order: list = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from a scalar
    root. Fan-out contributions accumulate additively; across repeated calls
    gradients also accumulate (clear with zero_grad between steps)."""
    if root.size != 1:
        raise GraphError(f"backward: root must be a scalar, got shape {root.shape}")
    order = topo_order(root)
    grads: dict = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] += pg
            else:
                grads[key] = pg
