"""A small reverse-mode differentiation engine over float64 numpy arrays.

Every differentiable computation in the package is expressed with the
operations below. An operation records its parents and a closure mapping the
output gradient to one gradient per parent; :func:`backward` walks the
recorded graph in reverse topological order and accumulates into the
``grad`` of every :class:`Parameter` it reaches.

Broadcasting is deliberately absent: binary operations require equal shapes
(or a Python scalar), and the few shape-changing patterns the model needs
(bias addition, masked reductions, batched matmul) are explicit operations.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DomainError, InvalidInputError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Inference mode: operations inside do not record a graph."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("tensor data must be finite")
        self.data = arr
        self.grad: Optional[NDArray[np.float64]] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @classmethod
    def _result(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> NDArray[np.float64]:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named learnable leaf whose gradient accumulates across backward calls."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return as_tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor._result(a.data + s, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._result(a.data * s, (a,), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., c] + b[c]``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} with bias {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return Tensor._result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    return Tensor._result(y, (x,), lambda g: (g * (y > 0),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a nonpositive value")
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    xd = x.data
    y = np.logaddexp(0.0, xd)
    sig = np.exp(xd - y)
    return Tensor._result(y, (x,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._result(y, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat_lastdim(xs: Sequence[Tensor]) -> Tensor:
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.shape[:-1] != lead:
            raise ShapeError("concat_lastdim: leading shapes differ")
    splits = np.cumsum([t.shape[-1] for t in xs])[:-1]
    y = np.concatenate([t.data for t in xs], axis=-1)
    return Tensor._result(y, tuple(xs), lambda g: tuple(np.split(g, splits, axis=-1)))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis`` (repeats allowed; gradients add up)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return Tensor._result(np.take(x.data, idx, axis=axis), (x,), bw)


def gather(x: Tensor, flat_indices) -> Tensor:
    """Elements of the flattened tensor at ``flat_indices``."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    shape, size = x.shape, x.data.size
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise InvalidInputError("gather index out of range")

    def bw(g):
        gx = np.zeros(size)
        np.add.at(gx, idx, g)
        return (gx.reshape(shape),)

    return Tensor._result(x.data.reshape(-1)[idx], (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or batched product of two 3-D tensors."""
    if not ((a.ndim == b.ndim == 2) or (a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0])) \
            or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return Tensor._result(ad @ bd, (a, b), bw)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = x.shape
    y = x.data.sum(axis=axis)
    if axis is None:
        return Tensor._result(np.asarray(y), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return Tensor._result(y, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul_scalar(sum(x, axis), 1.0 / n)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), bw)


def max_over_set(x: Tensor, mask=None) -> Tensor:
    """Max over axis 1 of ``(B, S, C)``, ignoring set slots where ``mask`` is False.

    The backward pass routes each gradient to the first maximising slot.
    """
    if x.ndim != 3:
        raise ShapeError(f"max_over_set expects (B, S, C), got {x.shape}")
    B, S, C = x.shape
    if mask is None:
        xd = x.data
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, S):
            raise ShapeError(f"mask shape {mask.shape} does not match {(B, S)}")
        if not np.all(mask.any(axis=1)):
            raise InvalidInputError("max_over_set over an empty set")
        xd = np.where(mask[:, :, None], x.data, -np.inf)
    arg = np.argmax(xd, axis=1)  # (B, C), first index on ties
    y = np.take_along_axis(xd, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        gx = np.zeros((B, S, C))
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return Tensor._result(y, (x,), bw)


def masked_logsumexp(x: Tensor, mask) -> Tensor:
    """log Σ exp over the last axis restricted to ``mask``; every row needs one entry."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("mask must match tensor shape")
    if not np.all(mask.any(axis=-1)):
        raise InvalidInputError("masked_logsumexp over an empty row")
    xd = np.where(mask, x.data, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    y = (np.log(s) + m)[..., 0]
    w = e / s

    return Tensor._result(y, (x,), lambda g: (w * g[..., None],))


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance matrix between rows of ``a`` (N, D) and ``b`` (M, D).

    The gradient at a zero distance is taken as zero.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_distance: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    diff = ad[:, None, :] - bd[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def bw(g):
        coef = np.divide(g, d, out=np.zeros_like(d), where=d > 0)
        ga = ad * coef.sum(axis=1, keepdims=True) - coef @ bd
        gb = bd * coef.sum(axis=0)[:, None] - coef.T @ ad
        return (ga, gb)

    return Tensor._result(d, (a, b), bw)


# ---------------------------------------------------------------------------
# log-domain Sinkhorn
# ---------------------------------------------------------------------------

def _lse(x, axis):
    """Stable log-sum-exp; overwrites ``x``, which callers pass as a fresh temporary."""
    m = x.max(axis=axis, keepdims=True)
    x -= m
    np.exp(x, out=x)
    return np.squeeze(m, axis) + np.log(x.sum(axis=axis))


def sinkhorn_log_forward(L, log_a, log_b, iterations: int):
    """Batched log-domain Sinkhorn on ``(G, M, N)`` log-kernels.

    Returns ``(log_Z, us, vs)`` with the per-iteration scalings kept for the
    backward pass.
    """
    G, M, N = L.shape
    v = np.zeros((G, N))
    us = np.empty((iterations, G, M))
    vs = np.empty((iterations, G, N))
    for t in range(iterations):
        u = log_a - _lse(L + v[:, None, :], axis=2)
        v = log_b - _lse(L + u[:, :, None], axis=1)
        us[t], vs[t] = u, v
    log_z = L + us[-1][:, :, None] + vs[-1][:, None, :]
    return log_z, us, vs


def _softmax(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def log_sinkhorn(L: Tensor, log_a, log_b, iterations: int) -> Tensor:
    """Differentiable log-domain Sinkhorn normalisation.

    ``log_a`` (G, M) and ``log_b`` (G, N) are constant log-marginals. The
    backward pass is the exact reverse of the unrolled iterations.
    """
    if L.ndim != 3:
        raise ShapeError("log_sinkhorn expects (G, M, N)")
    if iterations < 1:
        raise InvalidInputError("iterations must be positive")
    Ld = L.data
    log_a = np.asarray(log_a, dtype=np.float64)
    log_b = np.asarray(log_b, dtype=np.float64)
    log_z, us, vs = sinkhorn_log_forward(Ld, log_a, log_b, iterations)

    def bw(g):
        gL = g.copy()
        gu = g.sum(axis=2)
        gv = g.sum(axis=1)
        for t in range(iterations - 1, -1, -1):
            # v_t = log_b - lse_i(L + u_t)
            P = _softmax(Ld + us[t][:, :, None], axis=1)
            Pg = P * gv[:, None, :]
            gL -= Pg
            gu = gu - Pg.sum(axis=2)
            # u_t = log_a - lse_j(L + v_{t-1})
            v_prev = vs[t - 1] if t > 0 else np.zeros_like(vs[0])
            Q = _softmax(Ld + v_prev[:, None, :], axis=2)
            Qg = Q * gu[:, :, None]
            gL -= Qg
            gv = -Qg.sum(axis=1)
            gu = np.zeros_like(gu)
        return (gL,)

    return Tensor._result(log_z, (L,), bw)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.data.size != 1:
        raise InvalidInputError("backward needs a scalar loss")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5,
                   entries: Optional[dict] = None) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|).

    ``fn`` must rebuild the scalar loss from the current parameter values.
    ``entries`` optionally maps a parameter name to the flat indices to probe;
    by default every entry of every parameter is checked.
    """
    params = list(params)
    zero_grad(params)
    backward(fn())
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            idx = range(flat.size) if entries is None or p.name not in entries else entries[p.name]
            for k in idx:
                orig = flat[k]
                flat[k] = orig + h
                fp = fn().item()
                flat[k] = orig - h
                fm = fn().item()
                flat[k] = orig
                numeric = (fp - fm) / (2 * h)
                err = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]))
                worst = max(worst, err)
    return worst
