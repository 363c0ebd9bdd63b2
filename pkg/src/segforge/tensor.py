"""Minimal dense tensor with a dynamic reverse-mode differentiation graph.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing the vector-Jacobian product.  The graph is rebuilt on every
forward pass; :func:`backward` walks it in reverse topological order.

All data is stored as 64-bit floats.  Broadcasting is limited to a scalar
right-hand operand.
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int]


class ShapeError(ValueError):
    """Operand extents are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operation was asked to evaluate outside its domain (log of <= 0, x / 0)."""


class GraphError(RuntimeError):
    """The differentiation graph is malformed or the seed is not a scalar."""


class Tensor:
    """N-dimensional float64 array that participates in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def backward(self) -> Dict[int, np.ndarray]:
        return backward(self)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, op=op, parents=parents if needs else (), backward_fn=backward_fn if needs else None)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor) -> bool:
    """Return True when ``b`` is broadcast as a scalar."""
    if a.shape == b.shape:
        return False
    if b.size == 1 and b.ndim <= a.ndim:
        return True
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape} (only scalar broadcast is supported)")


def _reduce_to(grad: np.ndarray, scalar: bool, shape) -> np.ndarray:
    if not scalar:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    scalar = _check_binary(a, b)
    out = a.data + b.data

    def bw(g):
        return g, _reduce_to(g, scalar, b.shape)

    return _make(out, "add", (a, b), bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    scalar = _check_binary(a, b)
    out = a.data - b.data

    def bw(g):
        return g, _reduce_to(-g, scalar, b.shape)

    return _make(out, "sub", (a, b), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    scalar = _check_binary(a, b)
    out = a.data * b.data

    def bw(g):
        return g * b.data, _reduce_to(g * a.data, scalar, b.shape)

    return _make(out, "mul", (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    scalar = _check_binary(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero; guard the denominator before dividing")
    out = a.data / b.data

    def bw(g):
        gb = -g * a.data / (b.data * b.data)
        return g / b.data, _reduce_to(gb, scalar, b.shape)

    return _make(out, "div", (a, b), bw)


def neg(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def log(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value; apply clamp_min first")
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def exp(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflowed to a non-finite value")
    return _make(out, "exp", (a,), lambda g: (g * out,))


def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    if not floor > 0:
        raise ValueError(f"clamp floor must be positive, got {floor}")
    a = _as_tensor(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), "clamp_min", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and indexing
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        axes.append(ax % ndim)
    return tuple(sorted(set(axes)))


def reduce_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError("reduction over an empty axis")
    out = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(out, "sum", (a,), bw)


def reduce_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise ShapeError("mean over an empty selection")
    out = a.data.sum(axis=axes, keepdims=keepdims) / n
    in_shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return _make(out, "mean", (a,), bw)


def take(a: ArrayLike, indices: Sequence[int], axis: int) -> Tensor:
    """Select ``indices`` along ``axis``; gradient scatters back into place."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)
    in_shape = a.shape

    def bw(g):
        full = np.zeros(in_shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, "take", (a,), bw)


# ---------------------------------------------------------------------------
# image ops (N, C, H, W)
# ---------------------------------------------------------------------------

def softmax_channels(logits: ArrayLike) -> Tensor:
    x = _as_tensor(logits)
    if x.ndim != 4:
        raise ShapeError(f"softmax_channels expects (N, C, H, W), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def _pair_out(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def conv2d(x: ArrayLike, kernel: ArrayLike, bias: Optional[ArrayLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``kernel`` (Cout, Cin, kh, kw)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    bias = None if bias is None else _as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    ho, wo = _pair_out(h, kh, stride, padding), _pair_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} is empty")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # windows: (N, Cin, Ho, Wo, kh, kw)
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    kdata = kernel.data
    xp_shape = xp.shape

    def bw(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kdata[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, "conv2d", parents, bw)


def conv2d_transpose(x: ArrayLike, kernel: ArrayLike, bias: Optional[ArrayLike] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``kernel`` has shape (Cin, Cout, kh, kw).

    Forward is the input-gradient of :func:`conv2d` with the same kernel, so the
    output extent is ``(H - 1) * stride - 2 * padding + kh``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    bias = None if bias is None else _as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d_transpose expects 4-d input and kernel")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose output extent {ho}x{wo} is empty")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    kdata = kernel.data
    xdata = x.data
    full = np.zeros((n, cout, hf, wf))
    span_h, span_w = (h - 1) * stride + 1, (w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(xdata, kdata[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            full[:, :, i:i + span_h:stride, j:j + span_w:stride] += contrib
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.zeros((n, cout, hf, wf))
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        # windows over the full-size gradient aligned with each input pixel
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :w]
        # win: (N, Cout, H, W, kh, kw)
        gx = np.tensordot(win, kdata, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gk = np.tensordot(xdata, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, "conv2d_transpose", parents, bw)


def maxpool2d(x: ArrayLike, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties route the gradient to the first row-major position."""
    x = _as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError("maxpool2d expects (N, C, H, W)")
    n, c, h, w = x.shape
    if window > h or window > w or window < 1 or stride < 1:
        raise ShapeError(f"pool window {window} does not fit {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros((n, c, h, w))
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (gx,)

    return _make(np.ascontiguousarray(out), "maxpool2d", (x,), bw)


def concat_channels(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root``, inputs before consumers."""
    order: List[Tensor] = []
    state: Dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: List[Tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root.parents))]
    state[root.node_id] = 1
    while stack:
        node, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            stack.pop()
            state[node.node_id] = 2
            order.append(node)
            continue
        s = state.get(nxt.node_id)
        if s == 1:
            raise GraphError("cycle detected in differentiation graph")
        if s is None:
            state[nxt.node_id] = 1
            stack.append((nxt, iter(nxt.parents)))
    return order


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from node id to gradient for every leaf that received one;
    intermediate gradients are released as soon as they have been propagated.
    Leaves with ``requires_grad`` also get ``.grad`` accumulated.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(node.node_id, None) if node.parents else grads.get(node.node_id)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    return grads


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
