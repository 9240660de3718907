"""Minimal reverse-mode autodiff over dense float64 arrays.

Images are laid out H x W x C (no batch axis). Every op builds its output
eagerly and, when any input requires a gradient, records a node holding a
backward rule. ``backward`` replays those nodes in reverse topological order.
"""
from __future__ import annotations

import contextlib
import functools
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_GRAD_ENABLED = True
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # construction of graph nodes
    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
            if _TAPES:
                _TAPES[-1].nodes.append(out)
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_first(fn):
    """Let unary ops accept plain arrays as their first argument."""
    @functools.wraps(fn)
    def wrapper(a, *args, **kwargs):
        return fn(as_tensor(a), *args, **kwargs)
    return wrapper


class Tape:
    """Records graph nodes in creation order while active.

    Creation order is already topological, so ``backward`` can replay the
    list in reverse without a graph walk.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        backward(loss, order=self.nodes)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, order: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if order is None:
        order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf:
        _accumulate_leaf(loss, grads.pop(id(loss)))
        return
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.is_leaf:
                _accumulate_leaf(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.shape)
    t.grad = np.array(g, dtype=DTYPE) if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


@_coerce_first
def power(a: Tensor, p: float) -> Tensor:
    return Tensor._make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


@_coerce_first
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


@_coerce_first
def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


@_coerce_first
def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


@_coerce_first
def absolute(a: Tensor) -> Tensor:
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


@_coerce_first
def maximum(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) with a constant floor; gradient is zero where clamped."""
    keep = a.data >= floor
    return Tensor._make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


@_coerce_first
def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


@_coerce_first
def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


@_coerce_first
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@_coerce_first
def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU. Smooth everywhere, which keeps finite differences honest."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._make(x * cdf, (a,), bw)


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@_coerce_first
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._make(out, (a,), bw)


@_coerce_first
def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axes, keepdims) * (1.0 / n)


@_coerce_first
def global_avg_pool(x: Tensor) -> Tensor:
    """H x W x C -> C spatial mean per channel."""
    return mean(x, axis=(0, 1))


# -------------------------------------------------------------- shape / index


@_coerce_first
def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


@_coerce_first
def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


@_coerce_first
def getitem(a: Tensor, idx) -> Tensor:
    items = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in items)

    def bw(g):
        out = np.zeros_like(a.data)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return Tensor._make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


@_coerce_first
def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes."""
    if top == bottom == left == right == 0:
        return x
    widths = [(top, bottom), (left, right)] + [(0, 0)] * (x.ndim - 2)
    H, W = x.shape[:2]
    return Tensor._make(
        np.pad(x.data, widths), (x,),
        lambda g: (g[top:top + H, left:left + W],),
    )


@_coerce_first
def roll2d(x: Tensor, dy: int, dx: int) -> Tensor:
    return Tensor._make(
        np.roll(x.data, (dy, dx), axis=(0, 1)), (x,),
        lambda g: (np.roll(g, (-dy, -dx), axis=(0, 1)),),
    )


@_coerce_first
def broadcast_to(x: Tensor, shape) -> Tensor:
    return Tensor._make(
        np.broadcast_to(x.data, shape).copy(), (x,),
        lambda g: (_unbroadcast(g, x.shape),),
    )


# --------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """(..., M, K) @ (..., K, N). Leading axes broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), bw)


@_coerce_first
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last (channel) axis, then apply a per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs C={C}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolution


def _check_odd(kh, kw):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")


def _im2col(xp: np.ndarray, kh: int, kw: int, Ho: int, Wo: int) -> np.ndarray:
    cin = xp.shape[2]
    if kh == kw == 1:
        return xp.reshape(Ho * Wo, cin)
    cols = np.empty((Ho, Wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[i:i + Ho, j:j + Wo]
    return cols.reshape(Ho * Wo, kh * kw * cin)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """Cross-correlation of H x W x Cin with a kh x kw x Cin x Cout kernel."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and 4-d kernel, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    _check_odd(kh, kw)
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if padding == "same":
        py, px = kh // 2, kw // 2
    elif padding == "valid":
        py = px = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((py, py), (px, px), (0, 0))) if (py or px) else x.data
    Ho, Wo = xp.shape[0] - kh + 1, xp.shape[1] - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel larger than {x.shape[:2]} input (valid padding)")
    wmat = w.data.reshape(kh * kw * cin, cout)
    cols = _im2col(xp, kh, kw, Ho, Wo)  # Ho*Wo x (kh*kw*cin), kernel-native order
    out = (cols @ wmat).reshape(Ho, Wo, cout)
    if b is not None:
        out += b.data

    def bw(g):
        gx = gw = gb = None
        g2 = g.reshape(Ho * Wo, cout)
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(Ho, Wo, kh, kw, cin)
            if kh == kw == 1:
                gx = gcols.reshape(xp.shape)
            else:
                gx = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gx[i:i + Ho, j:j + Wo] += gcols[:, :, i, j]
            if py or px:
                gx = gx[py:py + x.shape[0], px:px + x.shape[1]]
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bw)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel k x k correlation with zero 'same' padding; w is k x k x C."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects HxWxC and kxkxC, got {x.shape}, {w.shape}")
    kh, kw, c = w.shape
    _check_odd(kh, kw)
    if x.shape[2] != c:
        raise ShapeError(f"depthwise_conv2d: input has {x.shape[2]} channels, kernel has {c}")
    H, W = x.shape[:2]
    py, px = kh // 2, kw // 2
    xp = np.pad(x.data, ((py, py), (px, px), (0, 0)))
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[i:i + H, j:j + W] * w.data[i, j]
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = (xp[i:i + H, j:j + W] * g).sum(axis=(0, 1))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + H, j:j + W] += g * w.data[i, j]
            gx = gxp[py:py + H, px:px + W]
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bw)


def dynamic_filter(x: Tensor, kv: Tensor, k: int) -> Tensor:
    """Spatially-variant depthwise filtering.

    ``kv`` is H x W x k*k; pixel (y, x) uses its own k x k kernel (row-major
    offsets) and that kernel is shared by every channel of ``x``.
    """
    x, kv = as_tensor(x), as_tensor(kv)
    if k % 2 == 0:
        raise ShapeError(f"dynamic kernel size must be odd, got {k}")
    if x.ndim != 3 or kv.ndim != 3 or kv.shape[:2] != x.shape[:2] or kv.shape[2] != k * k:
        raise ShapeError(f"dynamic_filter: features {x.shape} vs kernel volume {kv.shape} (k={k})")
    H, W = x.shape[:2]
    r = k // 2
    xp = np.pad(x.data, ((r, r), (r, r), (0, 0)))
    out = np.zeros_like(x.data)
    for t in range(k * k):
        i, j = divmod(t, k)
        out += kv.data[:, :, t:t + 1] * xp[i:i + H, j:j + W]

    def bw(g):
        gx = gk = None
        if kv.requires_grad:
            gk = np.empty_like(kv.data)
            for t in range(k * k):
                i, j = divmod(t, k)
                gk[:, :, t] = (g * xp[i:i + H, j:j + W]).sum(axis=2)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for t in range(k * k):
                i, j = divmod(t, k)
                gxp[i:i + H, j:j + W] += g * kv.data[:, :, t:t + 1]
            gx = gxp[r:r + H, r:r + W]
        return gx, gk

    return Tensor._make(out, (x, kv), bw)
