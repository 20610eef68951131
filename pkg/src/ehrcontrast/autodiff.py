"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When grad mode is on and any input
requires a gradient, the result keeps references to its parents together
with a closure mapping the output gradient to parent gradients. Calling
:meth:`Tensor.backward` on a scalar linearises that graph into a
:class:`ComputationTape` and runs it in reverse.

A loss may be back-propagated once. The graph is released afterwards and a
second call raises ``RuntimeError``; leaf gradients accumulate until
:func:`zero_grad` (or ``Module.zero_grad``) resets them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_GRAD_ENABLED = True


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
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> "ComputationTape":
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this loss; rebuild the graph first")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")
        tape = ComputationTape.from_output(self)
        tape.run(self)
        self._consumed = True
        return tape


class ComputationTape:
    """Topologically ordered record of the ops that produced a value."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def run(self, out: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node in reversed(self.entries):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _check_finite(op: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{op}: input contains non-finite values")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out = a.data**e

    def bw(g):
        return (g * e * a.data ** (e - 1.0),)

    return _result(out, (a,), bw, "pow")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("exp", a.data)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("log", a.data)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ValueError(f"masked_fill: mask shape {mask.shape} does not broadcast to {a.shape}") from None
    out = np.where(full, value, a.data)
    return _result(out, (a,), lambda g: (np.where(full, 0.0, g),), "masked_fill")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, ts, bw, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "getitem")


def take(table, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``table`` along ``axis`` (embedding lookup for axis 0)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % table.ndim
    n = table.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    out = np.take(table.data, idx, axis=ax)

    def bw(g):
        full = np.zeros_like(table.data)
        moved = np.moveaxis(full, ax, 0)
        g_moved = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, g_moved)
        return (full,)

    return _result(out, (table,), bw, "take")


def embedding(table, indices) -> Tensor:
    return take(table, indices, axis=0)


def take_last(a, indices) -> Tensor:
    """``np.take_along_axis`` on the last axis; ``indices`` broadcast over leading axes."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    lead = a.shape[:-1]
    idx_full = np.broadcast_to(idx, lead + idx.shape[-1:])
    out = np.take_along_axis(a.data, idx_full, axis=-1)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        rows = a.data.size // a.shape[-1]
        flat = full.reshape(rows, a.shape[-1])
        ii = idx_full.reshape(rows, -1)
        r = np.broadcast_to(np.arange(rows)[:, None], ii.shape)
        np.add.at(flat, (r, ii), g.reshape(rows, -1))
        return (full,)

    return _result(out, (a,), bw, "take_last")


def unfold_windows(a, w: int, axis: int = 1) -> Tensor:
    """Stack the ``2w+1`` neighbours of each position along a new axis.

    ``(..., L, ...) -> (..., L, 2w+1, ...)``; out-of-range neighbours are zero.
    Offsets run from ``-w`` to ``+w``.
    """
    a = as_tensor(a)
    ax = axis % a.ndim
    L = a.shape[ax]
    x = np.moveaxis(a.data, ax, 0)
    width = 2 * w + 1
    out = np.zeros(a.shape[:ax] + (L, width) + a.shape[ax + 1 :], dtype=DTYPE)
    view = np.moveaxis(out, (ax, ax + 1), (0, 1))
    for k, off in enumerate(range(-w, w + 1)):
        lo, hi = max(0, -off), min(L, L - off)
        if lo < hi:
            view[lo:hi, k] = x[lo + off : hi + off]

    def bw(g):
        gm = np.moveaxis(g, (ax, ax + 1), (0, 1))
        full = np.zeros((L,) + gm.shape[2:], dtype=DTYPE)
        for k, off in enumerate(range(-w, w + 1)):
            lo, hi = max(0, -off), min(L, L - off)
            if lo < hi:
                full[lo + off : hi + off] += gm[lo:hi, k]
        return (np.moveaxis(full, 0, ax),)

    return _result(out, (a,), bw, "unfold_windows")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``'bnd,bnwd->bnw'``."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in operand '{s}'")
        missing = set(s) - set(out_s) - set(other)
        if missing:
            raise ValueError(f"einsum: index {sorted(missing)} summed within a single operand")
    try:
        out = np.einsum(subscripts, np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))
    except ValueError as exc:
        raise ValueError(f"einsum '{subscripts}': shapes {a.shape} and {b.shape}: {exc}") from None

    def bw(g):
        g = np.ascontiguousarray(g)
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, np.ascontiguousarray(b.data)) if a.requires_grad else None
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, np.ascontiguousarray(a.data)) if b.requires_grad else None
        return ga, gb

    return _result(np.asarray(out), (a, b), bw, "einsum")


# ---------------------------------------------------------------------------
# composite nonlinearities


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), bw, "logsumexp")


def softplus(a) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def l2_normalize(a, axis: int = -1, eps: float = 1e-30) -> Tensor:
    norm = sqrt(tsum(a * a, axis=axis, keepdims=True) + eps)
    return div(a, norm)
