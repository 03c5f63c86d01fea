"""Minimal dense float64 tensor with tape-based reverse-mode differentiation.

Every value flowing through the models in this package is a :class:`Tensor`:
a numpy float64 array plus an optional gradient buffer and links to the
tensors it was computed from.  The forward pass records a dynamic graph;
:func:`backward` walks it once in reverse topological order.

Design notes
------------
* float64 only.  Gradient checking against central finite differences is a
  first-class use case, so precision beats speed everywhere.
* Tensors are immutable after creation except for their ``grad`` buffer.
  Graph construction and backward are single-threaded.
* Gradients accumulate across backward calls until explicitly zeroed.
* Broadcasting follows numpy trailing-dimension rules; backward sums the
  gradient back down to the original shape.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "ContractError",
    "backward",
    "matmul",
    "softmax",
    "linear",
    "layernorm",
    "gelu",
    "sigmoid",
    "softplus",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "conv2d",
    "concat",
    "reshape",
    "permute",
    "roll",
    "pad2d",
    "broadcast_to",
    "gather_rows",
    "scatter_rows",
    "take_along",
    "tsum",
    "tmax",
    "tmin",
    "mean",
    "l1",
    "square",
    "dropout",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw data, got Tensor")
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Parameters
    ----------
    data:
        Anything ``np.asarray`` accepts; stored as float64, row-major.
    requires_grad:
        Marks a leaf whose gradient should be retained by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_links")

    # make numpy defer to Tensor's reflected operators (ndarray * Tensor)
    __array_ufunc__ = None
    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # (parent, fn) pairs; fn maps the output gradient to the parent's
        # gradient contribution.  Only parents on a grad path are linked.
        self._links: tuple = ()

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _on_grad_path(self) -> bool:
        return self.requires_grad or bool(self._links)

    # -- graph bookkeeping -------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return tmin(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def abs(self):
        return tabs(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a registry name.

    The name is assigned when the owning model walks its parameter tree;
    names are dotted attribute paths and unique within a model.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


# ---------------------------------------------------------------------------
# graph construction / backward
# ---------------------------------------------------------------------------


def _node(data: np.ndarray, links) -> Tensor:
    out = Tensor(data)
    out._links = tuple((p, fn) for p, fn in links if p._on_grad_path())
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be scalar (size 1).  Repeated calls accumulate into
    existing gradients; callers zero grads between steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(
            f"backward expects a scalar loss, got shape {loss.shape}"
        )

    # Iterative postorder topological sort over the recorded graph.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._links:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, fn in node._links:
            contrib = fn(g)
            key = id(parent)
            if key in grads:
                # out-of-place: contrib may be a view of g or other buffers
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


# ---------------------------------------------------------------------------
# elementwise ops (numpy broadcasting, trailing-dimension rules)
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.data + b.data,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    inv = 1.0 / b.data
    return _node(
        a.data * inv,
        [
            (a, lambda g: _unbroadcast(g * inv, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data * inv * inv, b.shape)),
        ],
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, [(a, lambda g: -g)])


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _node(
        a.data**p, [(a, lambda g: g * p * a.data ** (p - 1.0))]
    )


def square(a: Tensor) -> Tensor:
    """Elementwise square; backward is 2x * g."""
    return _node(a.data * a.data, [(a, lambda g: g * 2.0 * a.data)])


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, [(a, lambda g: g * out_data)])


_LOG_FLOOR = 1e-300


def log(a: Tensor) -> Tensor:
    """Natural log, guarded: inputs are floored at 1e-300 so finite
    non-negative inputs never produce NaN/-inf."""
    safe = np.maximum(a.data, _LOG_FLOOR)
    return _node(np.log(safe), [(a, lambda g: g / safe)])


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _node(out_data, [(a, lambda g: g * 0.5 / np.maximum(out_data, 1e-300))])


def tabs(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))])


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    mask = a.data > lo
    return _node(np.where(mask, a.data, lo), [(a, lambda g: g * mask)])


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _node(out_data, [(a, lambda g: g * (1.0 - out_data * out_data))])


def tsin(a: Tensor) -> Tensor:
    return _node(np.sin(a.data), [(a, lambda g: g * np.cos(a.data))])


def tcos(a: Tensor) -> Tensor:
    return _node(np.cos(a.data), [(a, lambda g: -g * np.sin(a.data))])


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _stable_sigmoid(a.data)
    return _node(out_data, [(a, lambda g: g * out_data * (1.0 - out_data))])


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = _stable_sigmoid(a.data)
    return _node(out_data, [(a, lambda g: g * sig)])


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GeLU, tanh approximation (smooth and cheap at float64)."""
    x = a.data
    # inner = c * x * (1 + 0.044715 x^2), built with few temporaries
    inner = x * x
    inner *= 0.044715
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    t = np.tanh(inner)
    out = 1.0 + t
    out *= x
    out *= 0.5

    def bwd(g):
        x2 = x * x
        dinner = x2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _GELU_C
        sech2 = 1.0 - t * t
        return g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)

    return _node(out, [(a, bwd)])


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _node(
        a.data.sum(axis=axis, keepdims=keepdims),
        [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims))],
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return _node(
        a.data.mean(axis=axis, keepdims=keepdims),
        [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims) / count)],
    )


def _extreme(a: Tensor, axis, keepdims: bool, fn, argfn) -> Tensor:
    if axis is None:
        flat_idx = argfn(a.data)
        out_data = a.data.reshape(-1)[flat_idx]

        def bwd(g):
            gi = np.zeros(a.size)
            gi[flat_idx] = g.reshape(())
            return gi.reshape(a.shape)

        return _node(np.asarray(out_data), [(a, bwd)])

    idx = argfn(a.data, axis=axis)
    out_data = fn(a.data, axis=axis, keepdims=keepdims)
    idx_exp = np.expand_dims(idx, axis)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        gi = np.zeros_like(a.data)
        np.put_along_axis(gi, idx_exp, gg, axis=axis)
        return gi

    return _node(out_data, [(a, bwd)])


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties route the gradient to the first maximum."""
    return _extreme(a, axis, keepdims, np.max, np.argmax)


def tmin(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Min reduction; ties route the gradient to the first minimum."""
    return _extreme(a, axis, keepdims, np.min, np.argmin)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _node(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def roll(a: Tensor, shifts, axes) -> Tensor:
    """Cyclic shift along ``axes``; backward rolls the gradient back."""
    shifts = tuple(int(s) for s in np.atleast_1d(shifts))
    axes = tuple(int(x) for x in np.atleast_1d(axes))
    back = tuple(-s for s in shifts)
    return _node(
        np.roll(a.data, shifts, axes), [(a, lambda g: np.roll(g, back, axes))]
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_bwd(i):
        sl = [slice(None)] * datas[0].ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(
        np.concatenate(datas, axis=axis),
        [(t, make_bwd(i)) for i, t in enumerate(tensors)],
    )


def tslice(a: Tensor, key) -> Tensor:
    """Basic slicing (slices / ints); backward scatters into zeros."""

    def bwd(g):
        gi = np.zeros_like(a.data)
        gi[key] = g
        return gi

    return _node(a.data[key], [(a, bwd)])


def pad2d(a: Tensor, pad_h: tuple, pad_w: tuple) -> Tensor:
    """Zero-pad the last two axes by (before, after) amounts."""
    widths = [(0, 0)] * (a.ndim - 2) + [tuple(pad_h), tuple(pad_w)]
    sl = tuple(
        slice(before, a.shape[i] + before)
        if i >= a.ndim - 2
        else slice(None)
        for i, (before, _) in enumerate(widths)
    )
    return _node(np.pad(a.data, widths), [(a, lambda g: g[sl])])


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _node(
        np.broadcast_to(a.data, shape).copy(),
        [(a, lambda g: _unbroadcast(g, a.shape))],
    )


def wrap_pad2d(a: Tensor, p: int) -> Tensor:
    """Circular (wrap) padding of the last two axes by p cells; supports
    p larger than the axis (content tiles)."""
    if p == 0:
        return a
    h, w = a.shape[-2], a.shape[-1]
    idx_h = np.arange(-p, h + p) % h
    idx_w = np.arange(-p, w + p) % w
    out_data = a.data[..., idx_h[:, None], idx_w[None, :]]
    flat_target = (idx_h[:, None] * w + idx_w[None, :]).ravel()
    lead = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    hp2, wp2 = h + 2 * p, w + 2 * p

    def bwd(g):
        g2 = g.reshape(lead, hp2 * wp2)
        offsets = (np.arange(lead) * (h * w))[:, None]
        flat = (offsets + flat_target[None, :]).ravel()
        out = np.bincount(flat, weights=g2.ravel(), minlength=lead * h * w)
        return out.reshape(a.shape)

    return _node(out_data, [(a, bwd)])


# ---------------------------------------------------------------------------
# indexing ops
# ---------------------------------------------------------------------------


def _row_scatter_add(values: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``values`` [k, ...] into ``n_rows`` rows at ``idx`` (bincount-based;
    much faster than np.add.at for large k)."""
    row_shape = values.shape[1:]
    width = int(np.prod(row_shape)) if row_shape else 1
    if len(idx) == 0:
        return np.zeros((n_rows,) + row_shape, dtype=np.float64)
    flat = (idx[:, None] * width + np.arange(width)[None, :]).ravel()
    out = np.bincount(
        flat, weights=values.reshape(len(idx), width).ravel(),
        minlength=n_rows * width,
    )
    return out.reshape((n_rows,) + row_shape)


def gather_rows(a: Tensor, idx) -> Tensor:
    """out[i] = a[idx[i]] along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        return _row_scatter_add(g, idx, a.shape[0])

    return _node(a.data[idx], [(a, bwd)])


def scatter_rows(src: Tensor, idx, n_rows: int) -> Tensor:
    """out = zeros([n_rows, ...]); out[idx[i]] += src[i] (sum on collision)."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != src.shape[0]:
        raise ShapeError(
            f"scatter_rows: index count {idx.shape} vs src rows {src.shape}"
        )
    out_data = _row_scatter_add(src.data, idx, int(n_rows))
    return _node(out_data, [(src, lambda g: g[idx])])


def take_along(a: Tensor, idx, axis: int) -> Tensor:
    """np.take_along_axis with scatter-add backward. ``idx`` is constant."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        gi = np.zeros_like(a.data)
        # add.at with an index grid: open mesh on all axes except `axis`.
        grids = np.ogrid[tuple(slice(s) for s in idx.shape)]
        grids = list(grids)
        grids[axis] = idx
        np.add.at(gi, tuple(grids), g)
        return gi

    return _node(np.take_along_axis(a.data, idx, axis=axis), [(a, bwd)])


# ---------------------------------------------------------------------------
# linear algebra / neural primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D classic or equal-rank batched (leading dims match)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (
        a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
    ):
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
            )
        raise ShapeError(f"matmul batch dims disagree: {a.shape} x {b.shape}")

    def bwd_a(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2))

    def bwd_b(g):
        return np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _node(np.matmul(a.data, b.data), [(a, bwd_a), (b, bwd_b)])


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically-guarded softmax: the running max is subtracted before
    exponentiation, so arbitrarily large finite logits cannot overflow."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return out_data * (g - dot)

    return _node(out_data, [(a, bwd)])


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis; x may have any leading shape."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def bwd_x(g):
        return g @ w.data.T

    def bwd_w(g):
        return x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, w.shape[1])

    links = [(x, bwd_x), (w, bwd_w)]
    if b is not None:
        links.append((b, lambda g: g.reshape(-1, w.shape[1]).sum(axis=0)))
    return _node(out_data, links)


def layernorm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Layer normalization over the last axis, fused backward."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bwd_x(g):
        gg = g * gamma.data
        return inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )

    def bwd_gamma(g):
        return (g * xhat).reshape(-1, n).sum(axis=0)

    def bwd_beta(g):
        return g.reshape(-1, n).sum(axis=0)

    return _node(out_data, [(x, bwd_x), (gamma, bwd_gamma), (beta, bwd_beta)])


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

_COL_INDEX_CACHE: dict = {}


def _conv_indices(h, w, kh, kw, stride, dilation, pad):
    key = (h, w, kh, kw, stride, dilation, pad)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - dilation * (kh - 1) - 1) // stride + 1
    ow = (wp - dilation * (kw - 1) - 1) // stride + 1
    ki, kj = np.meshgrid(
        np.arange(kh) * dilation, np.arange(kw) * dilation, indexing="ij"
    )
    oi, oj = np.meshgrid(
        np.arange(oh) * stride, np.arange(ow) * stride, indexing="ij"
    )
    rows = ki.reshape(-1, 1) + oi.reshape(1, -1)  # [kh*kw, oh*ow]
    cols = kj.reshape(-1, 1) + oj.reshape(1, -1)
    _COL_INDEX_CACHE[key] = (rows, cols, oh, ow)
    return rows, cols, oh, ow


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D convolution on [N, C, H, W] input with grouped kernels.

    ``w`` has shape [C_out, C_in/groups, KH, KW].  Implemented as im2col +
    batched matmul; depthwise convolution is the groups == C_in case.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.shape}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin_g * groups != cin or cout % groups != 0:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape}, weight {w.shape}, "
            f"groups={groups}"
        )
    cout_g = cout // groups

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    rows, cols, oh, ow = _conv_indices(h, wd, kh, kw, stride, dilation, padding)
    # cols_mat: [N, C, KHKW, L] -> [N, G, C_g*KHKW, L]
    patches = xp[:, :, rows, cols]
    l = oh * ow
    cols_mat = patches.reshape(n, groups, cin_g * kh * kw, l)
    wg = w.data.reshape(groups, cout_g, cin_g * kh * kw)

    out_data = np.matmul(wg[None], cols_mat)  # [N, G, C_out_g, L]
    out_data = out_data.reshape(n, cout, oh, ow)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    hp, wp = xp.shape[2], xp.shape[3]

    def bwd_x(g):
        gg = g.reshape(n, groups, cout_g, l)
        dcols = np.matmul(np.swapaxes(wg, -1, -2)[None], gg)
        dpatches = dcols.reshape(n, cin, kh * kw, l)
        # scatter back via bincount over flattened positions
        base = (rows * wp + cols).ravel()  # [kh*kw*l]
        lead = (np.arange(n * cin) * (hp * wp))[:, None]
        flat = (lead + base[None, :]).ravel()
        dxp = np.bincount(
            flat, weights=dpatches.reshape(n * cin, -1).ravel(),
            minlength=n * cin * hp * wp,
        ).reshape(n, cin, hp, wp)
        if padding:
            return dxp[:, :, padding:-padding, padding:-padding]
        return dxp

    def bwd_w(g):
        gg = g.reshape(n, groups, cout_g, l)
        dwg = np.matmul(gg, np.swapaxes(cols_mat, -1, -2)).sum(axis=0)
        return dwg.reshape(cout, cin_g, kh, kw)

    links = [(x, bwd_x), (w, bwd_w)]
    if b is not None:
        links.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _node(out_data, links)


# ---------------------------------------------------------------------------
# losses / misc
# ---------------------------------------------------------------------------


def l1(a: Tensor, b) -> Tensor:
    """Mean absolute difference over all elements."""
    return mean(tabs(sub(a, b)))


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode with an explicit rng."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _node(a.data * keep, [(a, lambda g: g * keep)])


# ---------------------------------------------------------------------------
# serialization: magic "PF3DTNSR", u32 rank, u64 dims, f64 payload (LE)
# ---------------------------------------------------------------------------

_MAGIC = b"PF3DTNSR"


def write_tensor(buf, arr: np.ndarray) -> None:
    """Append one array to a binary stream in the checkpoint wire format."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(arr.astype("<f8").tobytes())


def read_tensor(buf) -> np.ndarray:
    magic = buf.read(8)
    if magic != _MAGIC:
        raise ContractError(f"bad tensor magic: {magic!r}")
    (rank,) = struct.unpack("<I", buf.read(4))
    dims = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(buf.read(8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(dims)
