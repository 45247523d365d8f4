"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the AdaViT stack needs are provided. Every op takes
and returns :class:`Tensor`; the backward closure of an op maps the output
gradient to one gradient per parent (``None`` for parents that do not
require grad).

Broadcasting is restricted to *leading* dimensions: the second operand of a
binary op must be a scalar or have a shape equal to a suffix of the first
operand's shape. Anything else needs an explicit reshape.
"""

from __future__ import annotations

import contextlib
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_GRAD_ENABLED = True

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
TENSOR_MAGIC = b"ATNSR1"


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

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
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _check_suffix(a_shape, b_shape, op):
    if b_shape == () or a_shape == b_shape:
        return
    if len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape):
        return
    raise ShapeError(f"{op}: shape {b_shape} is not a suffix of {a_shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    # keep the wider operand first so suffix broadcasting is well defined
    swapped = False
    if b.ndim > a.ndim:
        a, b = b, a
        swapped = True
    return a, b, swapped


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return g, _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    sb = b.shape

    def backward(g):
        ga = g * bd if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    if b.ndim > a.ndim:
        raise ShapeError("div: divisor must not have more dims than dividend")
    _check_suffix(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    sb = b.shape

    def backward(g):
        ga = g / bd if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, sb) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale ``x[c, ...]`` by ``s[c]`` (broadcast over trailing axes)."""
    if s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"channel_scale: {s.shape} does not match leading dim of {x.shape}")
    view = (-1,) + (1,) * (x.ndim - 1)
    sd = s.data.reshape(view)
    xd = x.data
    axes = tuple(range(1, x.ndim))

    def backward(g):
        gx = g * sd if x.requires_grad else None
        gs = (g * xd).sum(axis=axes) if s.requires_grad else None
        return gx, gs

    return _make(xd * sd, (x, s), backward, "channel_scale")


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b[c]`` to every element of ``x[c, ...]``."""
    if b.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"channel_bias: {b.shape} does not match leading dim of {x.shape}")
    view = (-1,) + (1,) * (x.ndim - 1)
    axes = tuple(range(1, x.ndim))

    def backward(g):
        return g, g.sum(axis=axes)

    return _make(x.data + b.data.reshape(view), (x, b), backward, "channel_bias")


# ---------------------------------------------------------------------------
# elementwise functions
# ---------------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _make(np.where(mask, xd, 0.0).astype(xd.dtype), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    out = x.data[idx]
    advanced = _has_advanced(idx)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather ``x[rows]`` along axis 0; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, rows, g)
        return (full,)

    return _make(x.data[rows], (x,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shp = list(t.shape)
        shp.insert(axis if axis >= 0 else len(shp) + 1 + axis, 1)
        expanded.append(reshape(t, shp))
    return concat(expanded, axis=axis)


def pad_zeros(x: Tensor, pad: int, axes: Sequence[int]) -> Tensor:
    widths = [(0, 0)] * x.ndim
    for a in axes:
        widths[a] = (pad, pad)
    out = np.pad(x.data, widths)
    sl = tuple(slice(pad, -pad) if a in axes else slice(None) for a in range(x.ndim))
    return _make(out, (x,), lambda g: (g[sl],), "pad")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    ``b`` may have fewer leading dims than ``a`` (shared across the batch).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2][-(b.ndim - 2):] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError("matmul: left operand must carry the batch dims")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if gb.ndim > bd.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data

    def backward(g):
        gxhat = g * gd if gd is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(xd.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma is not None and gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta is not None and beta.requires_grad else None
        return gx, ggamma, gbeta

    parents = [x]
    parents.append(gamma if gamma is not None else Tensor(np.zeros(0)))
    parents.append(beta if beta is not None else Tensor(np.zeros(0)))
    return _make(out, parents, backward, "layer_norm")


# ---------------------------------------------------------------------------
# max reductions
# ---------------------------------------------------------------------------

def max_over_axis(x: Tensor, axis: int = 0) -> Tensor:
    """Max along ``axis``; backward routes to the first argmax (lowest index)."""
    xd = x.data
    axis = axis % x.ndim
    idx = xd.argmax(axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), backward, "max_over_axis")


def segment_reduce(x: Tensor, segments, num_segments: int, mode: str = "max") -> Tensor:
    """Reduce rows of ``x[R, ...]`` sharing a segment id to ``[num_segments, ...]``.

    ``mode='max'`` routes gradient to the lowest row index attaining the max;
    ``mode='mean'`` averages. Every segment must receive at least one row.
    """
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ShapeError("segment ids must label every row")
    counts = np.bincount(seg, minlength=num_segments)
    if counts.shape[0] > num_segments or np.any(counts[:num_segments] == 0):
        raise ShapeError("segment_reduce: some segment has no contributing rows")
    xd = x.data
    tail = x.shape[1:]
    if mode == "mean":
        out = np.zeros((num_segments,) + tail, dtype=xd.dtype)
        np.add.at(out, seg, xd)
        inv = (1.0 / counts).astype(xd.dtype).reshape((-1,) + (1,) * len(tail))
        out = out * inv

        def backward(g):
            return ((g * inv)[seg],)

        return _make(out, (x,), backward, "segment_mean")
    if mode != "max":
        raise ValueError(f"unknown reduction {mode!r}")
    out = np.full((num_segments,) + tail, -np.inf, dtype=xd.dtype)
    np.maximum.at(out, seg, xd)
    hit = xd == out[seg]
    rows = np.broadcast_to(np.arange(xd.shape[0]).reshape((-1,) + (1,) * len(tail)), xd.shape)
    first = np.full(out.shape, xd.shape[0], dtype=np.int64)
    np.minimum.at(first, seg, np.where(hit, rows, xd.shape[0]))
    route = rows == first[seg]

    def backward(g):
        return (np.where(route, g[seg], 0.0).astype(g.dtype),)

    return _make(out, (x,), backward, "segment_max")


# ---------------------------------------------------------------------------
# 3D convolutions (channel-first, no batch axis)
# ---------------------------------------------------------------------------

def _check_conv_extent(extent, kernel, stride, padding):
    span = extent + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv3d: extent {extent} (padding {padding}) incompatible with kernel {kernel}, stride {stride}")
    return span // stride + 1


def conv3d(x: Tensor, W: Tensor, B: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """``x[Cin, X, Y, Z]`` convolved with ``W[Cout, Cin, k, k, k]``.

    The ``kernel == stride`` case (non-overlapping patch embedding) is a
    single reshape + matmul; other cases accumulate one matmul per kernel
    offset.
    """
    if x.ndim != 4 or W.ndim != 5:
        raise ShapeError("conv3d expects x[C,X,Y,Z] and W[Co,Ci,k,k,k]")
    cout, cin, k = W.shape[0], W.shape[1], W.shape[2]
    if W.shape[2:] != (k, k, k):
        raise ShapeError("conv3d: only cubic kernels")
    if x.shape[0] != cin:
        raise ShapeError(f"conv3d: input has {x.shape[0]} channels, kernel expects {cin}")
    out_ext = [_check_conv_extent(e, k, stride, padding) for e in x.shape[1:]]
    if k == stride and padding == 0:
        out = _patch_conv(x, W, stride, out_ext)
    else:
        out = _offset_conv(x, W, stride, padding, out_ext)
    if B is not None:
        out = channel_bias(out, B)
    return out


def _patch_conv(x: Tensor, W: Tensor, p: int, grid) -> Tensor:
    gx, gy, gz = grid
    cin = x.shape[0]
    cout = W.shape[0]
    xd = x.data
    cols = (xd.reshape(cin, gx, p, gy, p, gz, p)
              .transpose(1, 3, 5, 0, 2, 4, 6)
              .reshape(gx * gy * gz, cin * p ** 3))
    wmat = W.data.reshape(cout, -1)
    out = (cols @ wmat.T).T.reshape(cout, gx, gy, gz)

    def backward(g):
        gm = g.reshape(cout, -1)
        gx_ = None
        if x.requires_grad:
            gcols = gm.T @ wmat
            gx_ = (gcols.reshape(gx, gy, gz, cin, p, p, p)
                        .transpose(3, 0, 4, 1, 5, 2, 6)
                        .reshape(x.shape))
        gw = (gm @ cols).reshape(W.shape) if W.requires_grad else None
        return gx_, gw

    return _make(np.ascontiguousarray(out), (x, W), backward, "conv3d_patch")


def _im2col(xp: np.ndarray, k: int, s: int = 1) -> np.ndarray:
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(xp.shape[0] * k ** 3, -1)


def _correlate(xp: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation of ``xp[Ci, ...]`` with ``W[Co, Ci, k, k, k]``.

    With more input than output channels it is cheaper to multiply every
    kernel offset at once and shift-add the results than to build im2col
    columns.
    """
    cout, cin, k = W.shape[0], W.shape[1], W.shape[2]
    P = xp.shape[1:]
    o = tuple(e - k + 1 for e in P)
    if cin <= cout:
        return (W.reshape(cout, -1) @ _im2col(xp, k)).reshape((cout,) + o)
    big = (W.transpose(2, 3, 4, 0, 1).reshape(k ** 3 * cout, cin) @ xp.reshape(cin, -1))
    big = big.reshape((k, k, k, cout) + P)
    out = np.zeros((cout,) + o, dtype=np.result_type(xp, W))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out += big[i, j, l, :, i:i + o[0], j:j + o[1], l:l + o[2]]
    return out


def _offset_conv(x: Tensor, W: Tensor, s: int, pad: int, out_ext) -> Tensor:
    cout, cin, k = W.shape[0], W.shape[1], W.shape[2]
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else xd
    if s == 1 and pad <= k - 1:
        return _stride1_conv(x, W, xp, pad, out_ext)
    ox, oy, oz = out_ext
    nvox = ox * oy * oz
    cols = _im2col(xp, k, s)
    wmat = W.data.reshape(cout, -1)
    out = wmat @ cols

    def backward(g):
        gm = g.reshape(cout, nvox)
        gw = (gm @ cols.T).reshape(W.shape) if W.requires_grad else None
        gx_ = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(cin, k, k, k, ox, oy, oz)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[:, i:i + s * (ox - 1) + 1:s, j:j + s * (oy - 1) + 1:s,
                            l:l + s * (oz - 1) + 1:s] += gcols[:, i, j, l]
            gx_ = gxp[:, pad:pad + xd.shape[1], pad:pad + xd.shape[2], pad:pad + xd.shape[3]] if pad else gxp
        return gx_, gw

    return _make(out.reshape(cout, ox, oy, oz), (x, W), backward, "conv3d")


def _stride1_conv(x: Tensor, W: Tensor, xp: np.ndarray, pad: int, out_ext) -> Tensor:
    cout, cin, k = W.shape[0], W.shape[1], W.shape[2]
    out = _correlate(xp, W.data)

    def backward(g):
        gw = None
        if W.requires_grad:
            gw = (g.reshape(cout, -1) @ _im2col(xp, k).T).reshape(W.shape)
        gx_ = None
        if x.requires_grad:
            # input gradient = full correlation of g with the flipped, channel-swapped kernel
            q = k - 1 - pad
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (q, q))) if q else g
            flipped = np.ascontiguousarray(W.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx_ = _correlate(gp, flipped)
        return gx_, gw

    return _make(out, (x, W), backward, "conv3d")


def transposed_conv3d(x: Tensor, W: Tensor, B: Tensor | None = None, stride: int = 2) -> Tensor:
    """Non-overlapping transposed convolution, ``W[Cin, Cout, s, s, s]``.

    Each input voxel writes one ``s^3`` output block, so output extents are
    ``s`` times the input extents.
    """
    if x.ndim != 4 or W.ndim != 5:
        raise ShapeError("transposed_conv3d expects x[C,X,Y,Z] and W[Ci,Co,k,k,k]")
    cin, cout, k = W.shape[0], W.shape[1], W.shape[2]
    if k != stride or W.shape[2:] != (k, k, k):
        raise ShapeError("transposed_conv3d: kernel must equal stride")
    if x.shape[0] != cin:
        raise ShapeError(f"transposed_conv3d: input has {x.shape[0]} channels, kernel expects {cin}")
    _, X, Y, Z = x.shape
    s = stride
    xd = x.data
    xm = xd.reshape(cin, -1)
    wmat = W.data.reshape(cin, cout * s ** 3)
    blocks = xm.T @ wmat  # [V, cout*s^3]
    out = (blocks.reshape(X, Y, Z, cout, s, s, s)
                 .transpose(3, 0, 4, 1, 5, 2, 6)
                 .reshape(cout, X * s, Y * s, Z * s))

    def backward(g):
        gb = (g.reshape(cout, X, s, Y, s, Z, s)
               .transpose(1, 3, 5, 0, 2, 4, 6)
               .reshape(X * Y * Z, cout * s ** 3))
        gx_ = (gb @ wmat.T).T.reshape(x.shape) if x.requires_grad else None
        gw = (xm @ gb).reshape(W.shape) if W.requires_grad else None
        return gx_, gw

    out_t = _make(np.ascontiguousarray(out), (x, W), backward, "transposed_conv3d")
    if B is not None:
        out_t = channel_bias(out_t, B)
    return out_t


# ---------------------------------------------------------------------------
# parameter store and serialisation
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self._params.items())

    def set(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        if value.shape != t.shape:
            raise ShapeError(f"{name}: cannot assign {value.shape} into {t.shape}")
        t.data = np.array(value, dtype=t.dtype)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor blob; returns the array and the offset past it."""
    if buf[offset:offset + 6] != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    code, rank = struct.unpack_from("<BB", buf, offset + 6)
    shape = struct.unpack_from(f"<{rank}Q", buf, offset + 8)
    start = offset + 8 + 8 * rank
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    n = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=start).reshape(shape)
    return arr.astype(_CODE_DTYPES[code]), start + n * dtype.itemsize


def parameters_from(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
