"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation records a node on an implicit tape. Node ids
come from a global monotonically increasing counter, so sorting reachable
nodes by id gives a topological order; ``backward`` replays that order in
reverse and accumulates gradients by summation. ``detach`` produces a value
copy that has no parents, which is what makes the stop-gradient bypass in
:mod:`bbreprog.blackbox` work.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_LOG_FLOOR = 1e-8

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus an optional tape node.

    Leaves created with ``requires_grad=True`` receive gradients; interior
    tensors carry ``_parents`` and a ``_backward`` closure mapping the
    upstream gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "id", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.id = next(_ids)
        self.op = "leaf"
        self.name = name

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self._parents else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log_floored(a, eps: float = DEFAULT_LOG_FLOOR) -> Tensor:
    """``log(max(a, eps))``; the derivative uses ``1 / max(a, eps)``.

    Below the floor the true derivative is zero, but the flat-floor
    convention keeps a signal flowing out of silent regions.
    """
    if eps <= 0:
        raise ValueError("log floor must be positive")
    a = as_tensor(a)
    clipped = np.maximum(a.data, eps)
    return _node(np.log(clipped), (a,), lambda g: (g / clipped,), "log_floored")


def sqrt(a, deriv_floor: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / np.maximum(out, deriv_floor),), "sqrt")


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = out == a.data
    return _node(out, (a,), lambda g: (g * mask,), "clip")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


_UNARY = {"relu": relu, "exp": exp, "log_floored": log_floored}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None, eps: float = DEFAULT_LOG_FLOOR) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, exp, log_floored."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op == "log_floored":
        return log_floored(a, eps)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------------------
# linear algebra and reductions
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., m, k)`` and ``b`` of shape ``(k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def _count(shape, axes):
    n = 1
    for ax in axes:
        n *= shape[ax]
    if n == 0:
        raise ShapeError("reduction over an empty axis")
    return n


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = _count(a.shape, axes)
    out = a.data.sum(axis=axes, keepdims=keepdims) / n

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(out, (a,), bw, "mean")


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Biased (1/N) variance."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = _count(a.shape, axes)
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).sum(axis=axes, keepdims=keepdims) / n

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * (2.0 / n) * centered,)

    return _node(out, (a,), bw, "variance")


def reduce(op: str, t, axis=None, keepdims: bool = False) -> Tensor:
    if op == "mean":
        return mean(t, axis, keepdims)
    if op == "variance":
        return variance(t, axis, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = shifted / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(out, (a,), bw, "logsumexp")


# ----------------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice, np.integer)) for k in items)


def index(a, key) -> Tensor:
    """Numpy-style indexing; the backward pass scatters into zeros."""
    a = as_tensor(a)
    basic = _is_basic_index(key)

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _node(a.data[key], (a,), bw, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    ref = ts[0].shape
    ax = axis % len(ref) if ref else 0
    for t in ts[1:]:
        if t.ndim != len(ref) or any(i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(out, ts, bw, "concat")


def detach(a) -> Tensor:
    """Value-identical tensor with no tape parents."""
    a = as_tensor(a)
    out = Tensor(a.data.copy())
    out.op = "detach"
    return out


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------


def _reachable(loss: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def backward(loss: Tensor, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(leaf) for every grad-requiring leaf.

    Returns a map from leaf id to gradient. With ``accumulate`` the gradient
    is also added into each leaf's ``grad`` slot.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    leaves: dict[int, np.ndarray] = {}
    for node in _reachable(loss):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node.id] = g
            if accumulate:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
    return leaves


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each tensor in ``wrt`` (zeros if unreachable)."""
    wrt = list(wrt)
    leaves = backward(loss, accumulate=False)
    return [leaves.get(t.id, np.zeros(t.shape)) for t in wrt]


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update with bias correction.

    Weight decay is the classic L2 form: ``weight_decay * p`` is added to the
    gradient before the moment updates.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return state
