"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the nodes reachable
from a scalar loss in reverse topological order. The graph is rebuilt on every
forward pass, so stochastic nodes need no special handling.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameter, InvalidShape, NonFiniteError

_ids = itertools.count(1)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-d array of float64 values, optionally attached to an autodiff graph."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.node_id = next(_ids) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; the named functions below are the real implementations
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_reduce(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_reduce(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.node_id = next(_ids)
        out._parents = parents
        out._backward = backward
    else:
        out.node_id = None
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise InvalidShape(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def hadamard(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "hadamard",
    )


mul = hadamard


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def stop_gradient(a) -> Tensor:
    """Identity forward; contributes exactly zero gradient to ``a``.

    The result is a graph-detached constant, so no backward edge exists at all.
    """
    a = as_tensor(a)
    out = Tensor(a.data)
    out.op = "stop_gradient"
    out.stopped_id = a.node_id
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise InvalidShape(f"reshape: {a.shape} -> {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidShape(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def concat_channels(a, b) -> Tensor:
    """Stack ``C1xHxW`` and ``C2xHxW`` (or batched ``B x C x H x W``) along channels."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise InvalidShape(f"concat_channels: {a.shape} vs {b.shape}")
    return concat([a, b], axis=a.ndim - 3)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward, "sum")


def mean_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward, "mean")


def matmul(a, b) -> Tensor:
    """Batched matrix product (both operands at least 2-d, numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidShape(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise InvalidShape(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def softmax_temp(x, axis: int = -1, tau: float = 1.0) -> Tensor:
    """Softmax of ``x / tau`` along ``axis``, max-shifted for stability."""
    x = as_tensor(x)
    if not tau > 0:
        raise InvalidParameter(f"tau must be positive, got {tau}")
    if not -x.ndim <= axis < x.ndim:
        raise InvalidParameter(f"axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise InvalidShape("softmax over an empty axis")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / tau,)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise InvalidShape("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# image ops; layout is (batch, channels, rows, cols)


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise InvalidShape(f"expected CxHxW or BxCxHxW, got {x.shape}")
    return x, False


def conv2d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``weight`` has shape (out, in, kh, kw). Accepts CxHxW or BxCxHxW input.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xb, squeeze = _as_batched(x)
    if weight.ndim != 4 or weight.shape[1] != xb.shape[1]:
        raise InvalidShape(f"conv2d: input {x.shape} vs weight {weight.shape}")
    kh, kw = weight.shape[2:]
    p = int(padding)
    if xb.shape[2] + 2 * p < kh or xb.shape[3] + 2 * p < kw:
        raise InvalidShape("conv2d: kernel larger than padded input")
    xp = np.pad(xb.data, ((0, 0), (0, 0), (p, p), (p, p)))
    b, c = xb.shape[:2]
    o = weight.shape[0]
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # im2col: one row per output pixel, columns ordered (c, kh, kw) like the weight
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    parents = [xb, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise InvalidShape(f"conv2d: bias {bias.shape} for {o} filters")
        out = out + bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gx = None
        if xb.requires_grad:
            # column gradient laid out as (b, c, kh, kw, ho, wo) so each tap is a plain slice
            gcols = (wmat.T @ g.reshape(b, o, ho * wo)).reshape(b, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j]
            gx = np.ascontiguousarray(gxp[:, :, p : gxp.shape[2] - p, p : gxp.shape[3] - p])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    out_t = _make(out, parents, backward, "conv2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def _pool_view(x: Tensor, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise InvalidShape(f"pool size {k} does not divide {h}x{w}")
    return x.data.reshape(b, c, h // k, k, w // k, k)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    xb, squeeze = _as_batched(x)
    out = _pool_view(xb, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    out_t = _make(out, (xb,), backward, "avg_pool2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    xb, squeeze = _as_batched(x)
    b, c, h, w = xb.shape
    blocks = _pool_view(xb, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gb,)

    out_t = _make(out, (xb,), backward, "max_pool2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Node:
    node_id: int
    op: str
    inputs: list[int]
    shape: tuple[int, ...]


@dataclass
class Graph:
    """Topologically ordered view of the nodes reachable from an output."""

    nodes: list[Node] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list, repr=False)
    gradients: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        return json.dumps(
            [{"id": n.node_id, "op": n.op, "inputs": n.inputs, "shape": list(n.shape)} for n in self.nodes],
            indent=1,
        )


def trace(output: Tensor) -> Graph:
    """Collect graph nodes reachable from ``output``; inputs precede consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    if output.requires_grad:
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.node_id in seen:
                continue
            seen.add(t.node_id)
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
    nodes = [Node(t.node_id, t.op, [p.node_id for p in t._parents if p.requires_grad], t.shape) for t in order]
    return Graph(nodes=nodes, tensors=order)


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | Graph:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf ``.grad`` fields are overwritten. With ``wrt`` the gradients of those
    tensors are returned in order (zeros when unreachable); otherwise the traced
    graph carrying a node-id -> gradient map is returned.
    """
    if loss.size != 1:
        raise InvalidParameter(f"loss must be scalar, got shape {loss.shape}")
    graph = trace(loss)
    grads = graph.gradients
    if loss.requires_grad:
        grads[loss.node_id] = np.ones_like(loss.data)
    for t in reversed(graph.tensors):
        g = grads.get(t.node_id)
        if g is None or t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    for t in graph.tensors:
        if t.is_leaf:
            t.grad = grads.get(t.node_id, np.zeros_like(t.data))
    if wrt is None:
        return graph
    return [
        grads[t.node_id].copy() if t.requires_grad and t.node_id in grads else np.zeros_like(t.data)
        for t in wrt
    ]


def grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Analytic gradients of the scalar ``fn(*tensors)`` at ``arrays``."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    return backward(fn(*leaves), leaves)


def finite_difference(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradients of the scalar ``fn``; forward values only."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            fp = fn(*[Tensor(x) for x in base]).item()
            a[idx] = orig - h
            fm = fn(*[Tensor(x) for x in base]).item()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
