"""Double-precision tensors with tape-based reverse-mode differentiation.

Every differentiable op run while grad mode is on, with at least one input
that requires a gradient, appends a node to the active :class:`Tape`.
``Tensor.backward`` walks the tape in reverse, accumulates gradients into
leaves and then clears the tape. One tape per thread of training.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

STRICT = True
"""When set, dividing by an exact zero raises instead of producing inf."""


class ShapeError(ValueError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense row-major float64 array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._recorded = False  # produced by a taped op, i.e. not a leaf

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._recorded

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> None:
        get_tape().backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("out", "parents", "needs", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple, backward_fn: Callable):
        self.out = out
        self.parents = parents
        # frozen-ness is fixed at forward time
        self.needs = tuple(p.requires_grad for p in parents)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable ops.

    Nodes are appended as ops execute, so every node follows its parents.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        out._recorded = True
        self.nodes.append(Node(out, parents, backward_fn))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        if not self.nodes:
            raise RuntimeError("tape is empty; was the loss computed under no_grad?")
        pending = {id(loss): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for p, need, pg in zip(node.parents, node.needs, node.backward_fn(g)):
                if pg is None or not need:
                    continue
                if p.is_leaf:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    prev = pending.get(key)
                    pending[key] = pg if prev is None else prev + pg
        self.clear()


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def grad_enabled() -> bool:
    return get_tape().enabled


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Temporarily stop gradient accumulation into ``params``."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    tape = get_tape()
    needs = tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._recorded = False
    if needs:
        tape.record(out, parents, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple:
    try:
        return np.broadcast_shapes(tuple(a), tuple(b))
    except ValueError:
        raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible") from None


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing trailing-dimension broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ra, rb = a.requires_grad, b.requires_grad
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return (unbroadcast(g, a.shape) if ra else None,
                unbroadcast(g, b.shape) if rb else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ra, rb = a.requires_grad, b.requires_grad
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return (unbroadcast(g, a.shape) if ra else None,
                unbroadcast(-g, b.shape) if rb else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ra, rb = a.requires_grad, b.requires_grad
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return (unbroadcast(g * b.data, a.shape) if ra else None,
                unbroadcast(g * a.data, b.shape) if rb else None)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ra, rb = a.requires_grad, b.requires_grad
    broadcast_shape(a.shape, b.shape)
    if STRICT and np.any(b.data == 0.0):
        raise ZeroDivisionError(f"division by zero: divisor of shape {b.shape} has zero entries")
    out = a.data / b.data

    def bw(g):
        return (unbroadcast(g / b.data, a.shape) if ra else None,
                unbroadcast(-g * out / b.data, b.shape) if rb else None)

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of clamping it to 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    if STRICT and np.any(a.data <= 0.0):
        raise FloatingPointError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    if STRICT and np.any(a.data < 0.0):
        raise FloatingPointError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        if STRICT and np.any(out == 0.0):
            raise ZeroDivisionError("sqrt gradient at zero")
        return (g * 0.5 / out,)

    return _make(out, (a,), bw)


_UNARY = {"relu": relu, "exp": exp, "log": log, "sqrt": sqrt, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python number as ``b``."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ra, rb = a.requires_grad, b.requires_grad
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        return (g @ b.data.T if ra else None,
                a.data.T @ g if rb else None)

    return _make(a.data @ b.data, (a, b), bw)


def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, t, axes=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    ax = _norm_axes(axes, t.ndim)
    kept_shape = tuple(1 if i in ax else s for i, s in enumerate(t.shape))
    if kind == "sum":
        out = t.data.sum(axis=ax, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape), t.shape).copy(),)
    elif kind == "mean":
        count = int(np.prod([t.shape[i] for i in ax])) if ax else 1
        out = t.data.mean(axis=ax, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, t.shape).copy(),)
    elif kind == "max":
        kept = t.data.max(axis=ax, keepdims=True)
        out = kept if keepdims else kept.reshape([s for i, s in enumerate(t.shape) if i not in ax])
        mask = t.data == kept
        # ties split the gradient evenly
        share = mask / mask.sum(axis=ax, keepdims=True)

        def bw(g):
            return (g.reshape(kept_shape) * share,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _make(np.asarray(out, dtype=np.float64), (t,), bw)


def reshape(t, shape) -> Tensor:
    t = _lift(t)
    src = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, (t,), lambda g: (g.reshape(src),))


def transpose(t, axes=None) -> Tensor:
    t = _lift(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(t.data.transpose(axes)), (t,),
                 lambda g: (g.transpose(inv),))


def take(t, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; indices may repeat."""
    t = _lift(t)
    index = np.asarray(index, dtype=np.int64)
    shape = t.shape

    unique = np.unique(index).size == index.size

    def bw(g):
        full = np.zeros(shape, dtype=np.float64)
        where = (slice(None),) * axis + (index,)
        if unique:
            full[where] = g
        else:
            np.add.at(full, where, g)
        return (full,)

    return _make(np.take(t.data, index, axis=axis), (t,), bw)


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_lift(x) for x in ts)
    bounds = np.cumsum([x.shape[axis] for x in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([x.data for x in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, weights (out, in, k, k)."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d expects NCHW input and square kernels, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    n, _, h, wd = x.shape
    cout, k = w.shape[0], w.shape[2]
    oh = kernels.out_extent(h, k, stride, pad)
    ow = kernels.out_extent(wd, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    cols = kernels.im2col(np.ascontiguousarray(x.data), k, stride, pad)  # (in*k*k, n*oh*ow)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    parents = (x, w)
    rx, rw, rb = x.requires_grad, w.requires_grad, False
    if b is not None:
        b = _lift(b)
        rb = b.requires_grad
        out += b.data[:, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(out.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3))

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = kernels.col2im(wmat.T @ gm, x.shape, k, stride, pad) if rx else None
        gw = (gm @ cols.T).reshape(w.shape) if rw else None
        if b is None:
            return gx, gw
        return gx, gw, (gm.sum(axis=1) if rb else None)

    return _make(out, parents, bw)


def batch_norm(z, gamma, beta, eps: float = 1e-5):
    """Per-channel normalization of NCHW ``z`` with batch statistics, then affine.

    Returns the output tensor and the (mean, biased variance) arrays used.
    """
    z, gamma, beta = _lift(z), _lift(gamma), _lift(beta)
    c = z.shape[1]
    if z.ndim != 4 or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm got input {z.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    count = z.size // c
    mean = z.data.mean(axis=axes)
    xc = z.data - mean[None, :, None, None]
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    rz, rg, rb = z.requires_grad, gamma.requires_grad, beta.requires_grad

    def bw(g):
        gz = None
        if rz:
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            gz = (dxhat - (s1[None, :, None, None] + xhat * s2[None, :, None, None]) / count) \
                * inv[None, :, None, None]
        return (gz,
                (g * xhat).sum(axis=axes) if rg else None,
                g.sum(axis=axes) if rb else None)

    return _make(out, (z, gamma, beta), bw), mean, var


def log_softmax(t, axis: int = -1) -> Tensor:
    t = _lift(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (t,), bw)


def softmax(t, axis: int = -1) -> np.ndarray:
    """Plain (non-differentiable) softmax of a tensor's values."""
    d = _lift(t).data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)
