"""Dense tensors with a reverse-mode differentiation tape.

Every op returns a new immutable :class:`Tensor`.  When gradient recording is
enabled and at least one input requires a gradient, the result keeps a link to
its parents plus a closure mapping the output cotangent to input cotangents.
:func:`backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes or contraction plans do not line up."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Invalid request to the differentiation tape."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad", True)


def default_dtype():
    return getattr(_local, "dtype", np.float64)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    prev = _grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


@contextlib.contextmanager
def precision(dtype):
    """Set the storage dtype of every tensor created inside the block (float64 or float32)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported precision {dtype}")
    prev = default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    dtype = default_dtype()
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
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
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    """A leaf tensor that gradients can be requested for."""
    return Tensor(np.array(data, dtype=_as_array(data).dtype), requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a result on the tape.

    ``backward(g)`` must return one cotangent (or None) per parent.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError("non-finite value produced")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a} with {b}") from exc


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd
    return custom_op(out, (a, b),
                     lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    return custom_op(a.data * s, (a,), lambda g: (g * s,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = _sigmoid(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    s = _sigmoid(x)
    return custom_op(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return custom_op(np.log(x), (a,), lambda g: (g / x,))


def square(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    return custom_op(x * x, (a,), lambda g: (2.0 * g * x,))


def rsqrt(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("rsqrt of non-positive value")
    y = 1.0 / np.sqrt(x)
    return custom_op(y, (a,), lambda g: (-0.5 * g * y / x,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return custom_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, floor: float) -> Tensor:
    """max(a, floor) with zero gradient wherever the floor is active."""
    a = _wrap(a)
    x = a.data
    active = x > floor
    return custom_op(np.where(active, x, floor).astype(x.dtype), (a,), lambda g: (g * active,))


_UNARY = {
    "silu": silu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp,
    "log": log, "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None, *, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise DimensionError(f"{kind} needs a second operand")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, float(b))
    if kind == "clamp":
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and structure

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)
    return custom_op(np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return custom_op(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    inv = np.argsort(axes)
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return custom_op(np.array(a.data[idx]), (a,), bwd)


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [_wrap(t) for t in items]
    nd = items[0].ndim
    ax = axis % nd
    try:
        out = np.concatenate([t.data for t in items], axis=ax)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum([t.shape[ax] for t in items])[:-1]
    return custom_op(out, items, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [_wrap(t) for t in items]
    try:
        out = np.stack([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    ax = axis % out.ndim
    return custom_op(out, items,
                     lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(items))))


def stop_gradient(a) -> Tensor:
    """Same value, cut from the tape."""
    a = _wrap(a)
    return Tensor(a.data)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; cotangents flow to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight-through shapes differ: {hard.shape} vs {soft.shape}")
    return custom_op(hard, (soft,), lambda g: (g,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    return custom_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)
    return custom_op(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    y = np.logaddexp(0.0, x)
    return custom_op(y.astype(x.dtype), (a,), lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------------------
# contraction

def _parse_plan(plan: str) -> tuple[str, str, str]:
    try:
        lhs, out = plan.replace(" ", "").split("->")
        ia, ib = lhs.split(",")
    except ValueError as exc:
        raise DimensionError(f"malformed plan {plan!r}") from exc
    for sub_ in (ia, ib, out):
        if len(set(sub_)) != len(sub_) or (sub_ and not sub_.isalpha()):
            raise DimensionError(f"plan {plan!r}: repeated or invalid index in {sub_!r}")
    if set(out) - set(ia) - set(ib):
        raise DimensionError(f"plan {plan!r}: output index absent from inputs")
    return ia, ib, out


def _grad_einsum(g, g_idx, other, o_idx, target_idx, target_shape):
    keep = "".join(c for c in target_idx if c in g_idx or c in o_idx)
    res = np.einsum(f"{g_idx},{o_idx}->{keep}", g, other, optimize=True)
    if keep != target_idx:
        # indices summed away entirely on the forward pass: broadcast back
        res = res.reshape([target_shape[i] if c in keep else 1 for i, c in enumerate(target_idx)])
        res = np.broadcast_to(res, target_shape)
    return res


def contract(a, b, plan: str) -> Tensor:
    """Two-operand index contraction, e.g. ``contract(x, w, "nd,od->no")``."""
    a, b = _wrap(a), _wrap(b)
    ia, ib, out = _parse_plan(plan)
    if len(ia) != a.ndim or len(ib) != b.ndim:
        raise DimensionError(f"plan {plan!r} does not match ranks {a.shape}, {b.shape}")
    dims: dict[str, int] = {}
    for sub_, shp in ((ia, a.shape), (ib, b.shape)):
        for c, n in zip(sub_, shp):
            if dims.setdefault(c, n) != n:
                raise DimensionError(f"index {c!r} has sizes {dims[c]} and {n}")
    ad, bd = a.data, b.data
    res = np.einsum(f"{ia},{ib}->{out}", ad, bd, optimize=True)

    def bwd(g):
        ga = _grad_einsum(g, out, bd, ib, ia, ad.shape) if a.requires_grad else None
        gb = _grad_einsum(g, out, ad, ia, ib, bd.shape) if b.requires_grad else None
        return ga, gb
    return custom_op(np.asarray(res), (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for x of shape [N, d_in] and w of shape [d_out, d_in]."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with w {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        if b.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} vs out {wd.shape[0]}")
        y = y + b.data
        parents.append(b)

    def bwd(g):
        # broadcast views (zero strides) would push matmul off the BLAS path
        g = np.ascontiguousarray(g)
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)
    return custom_op(y, parents, bwd)


# ---------------------------------------------------------------------------
# convolution (NHWC activations, [kh, kw, c_in, c_out] kernels)

def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, hgt, wid, _ = x.shape
    kh, kw, _, cout = w.shape
    ho = (hgt + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = _pad_hw(x.data, padding)
    wd = w.data
    y = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            y += patch @ wd[i, j]
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        y += b.data
        parents.append(b)

    def bwd(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                patch = xp[sl]
                gw[i, j] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                if gxp is not None:
                    gxp[sl] += g @ wd[i, j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, padding:padding + hgt, padding:padding + wid, :] if padding else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 1, 2)))
        return tuple(res)
    return custom_op(y, parents, bwd)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` in its input; output side = (in-1)*stride - 2*pad + k."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with kernel {w.shape}")
    n, hgt, wid, _ = x.shape
    kh, kw, _, cout = w.shape
    hp = (hgt - 1) * stride + kh
    wp = (wid - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise DimensionError("conv_transpose2d: padding consumes the output")
    xd, wd = x.data, w.data
    yp = np.zeros((n, hp, wp, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            yp[:, i:i + stride * hgt:stride, j:j + stride * wid:stride, :] += xd @ wd[i, j]
    y = yp[:, padding:hp - padding, padding:wp - padding, :]
    y = np.ascontiguousarray(y)
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        y += b.data
        parents.append(b)

    def bwd(g):
        gp = np.zeros((n, hp, wp, cout), dtype=g.dtype)
        gp[:, padding:hp - padding, padding:wp - padding, :] = g
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                gs = gp[:, i:i + stride * hgt:stride, j:j + stride * wid:stride, :]
                gw[i, j] = np.tensordot(xd, gs, axes=([0, 1, 2], [0, 1, 2]))
                if gx is not None:
                    gx += gs @ wd[i, j].T
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 1, 2)))
        return tuple(res)
    return custom_op(y, parents, bwd)


# ---------------------------------------------------------------------------
# reverse pass

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params):
    """Gradients of scalar ``root`` with respect to ``params``.

    ``params`` is a mapping name -> Tensor (a dict of arrays is returned) or a
    sequence of Tensors (a list is returned).  Parameters that were tracked but
    never reached contribute zero gradients.
    """
    if root.data.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if isinstance(params, Mapping):
        names, tensors = list(params.keys()), list(params.values())
    else:
        names, tensors = None, list(params)
    for t in tensors:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise TapeError("requested parameter is not on the tape")

    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo(root)):
            if node._backward is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = [np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=t.dtype).reshape(t.shape)
           for t in tensors]
    return dict(zip(names, out)) if names is not None else out


def value_and_grad(fn: Callable[[dict], Tensor], arrays: Mapping[str, np.ndarray],
                   trainable: Iterable[str] | None = None):
    """Evaluate ``fn`` on leaf tensors built from ``arrays`` and differentiate it."""
    trainable = set(arrays) if trainable is None else set(trainable)
    leaves = {k: (parameter(v) if k in trainable else Tensor(v)) for k, v in arrays.items()}
    out = fn(leaves)
    loss = out[0] if isinstance(out, tuple) else out
    grads = backward(loss, {k: leaves[k] for k in arrays if k in trainable})
    return out, grads
