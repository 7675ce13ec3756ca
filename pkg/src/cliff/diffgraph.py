"""Minimal reverse-mode differentiation over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to gradients of each parent. Graphs are
rebuilt for every batch; nothing is cached between calls.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


# Ops whose backward rule is deliberately negated (negative-control hook).
_faults = threading.local()


def _broken(kind: str) -> bool:
    return kind in getattr(_faults, "ops", ())


@contextlib.contextmanager
def inject_fault(*kinds: str):
    """Negate the backward rule of the named ops while the context is active."""
    previous = getattr(_faults, "ops", frozenset())
    _faults.ops = frozenset(previous) | frozenset(kinds)
    try:
        yield
    finally:
        _faults.ops = previous


class Tensor:
    __slots__ = ("value", "_grad", "parents", "backward_fn", "kind", "requires_grad")
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward_fn=None, kind="leaf", requires_grad=True):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_fn: Callable | None = backward_fn
        self.kind = kind
        self.requires_grad = requires_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(kind={self.kind}, shape={self.shape})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def zero_grad(self):
        self._grad = None

    def backward(self):
        backward(self)

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False, kind="const")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(value, parents, backward_fn, kind):
    out = Tensor(value, parents=parents, backward_fn=backward_fn, kind=kind)
    out.requires_grad = any(p.requires_grad for p in parents)
    if _broken(kind):
        inner = backward_fn
        out.backward_fn = lambda g: tuple(None if r is None else -r for r in inner(g))
    return out


def custom(value, parents, backward_fn, kind: str) -> Tensor:
    """Register a fused op: ``backward_fn`` maps upstream grad to parent grads."""
    return _node(value, tuple(as_tensor(p) for p in parents), backward_fn, kind)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def div(a, b, eps: float = 0.0) -> Tensor:
    """Elementwise ``a / (b + eps)``.

    Zero denominators are rejected; pass ``eps`` when ``b`` is provably
    nonnegative and may touch zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    denom = b.value + eps
    if np.any(denom == 0.0):
        raise ZeroDivisionError("div: zero denominator (pass eps to guard)")
    out = a.value / denom
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / denom, a.shape), _unbroadcast(-g * out / denom, b.shape)),
        "div",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def back(g):
        if b.ndim == 1:
            return np.outer(g, b.value), a.value.T @ g
        return g @ b.value.T, a.value.T @ g

    return _node(out, (a, b), back, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log of ``a + eps``; non-positive arguments are rejected."""
    a = as_tensor(a)
    arg = a.value + eps
    if np.any(arg <= 0.0):
        raise FloatingPointError("log: non-positive argument (pass eps to guard)")
    return _node(np.log(arg), (a,), lambda g: (g / arg,), "log")


def sqrt(a, eps: float = 0.0) -> Tensor:
    a = as_tensor(a)
    arg = a.value + eps
    if np.any(arg < 0.0):
        raise FloatingPointError("sqrt: negative argument")
    out = np.sqrt(arg)
    if np.any(out == 0.0):
        raise ZeroDivisionError("sqrt: zero argument has no finite derivative (pass eps)")
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    # np.sign(0) == 0 gives the zero subgradient at the kink.
    sign = np.sign(a.value)
    return _node(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(out, (a,), back, "mean")


def broadcast(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def slice_(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    try:
        out = a.value[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err}") from None

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (a,), back, "slice")


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "abs": abs_,
    "sum": sum_,
    "mean": mean,
    "scale": scale,
    "broadcast": broadcast,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "sqrt": sqrt,
    "transpose": transpose,
    "reshape": reshape,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply the op named ``kind`` to ``inputs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topological(root)
    flow = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        node._grad = g if node._grad is None else node._grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            flow[key] = flow[key] + pg if key in flow else pg


def central_difference(f: Callable[[np.ndarray], float], point: np.ndarray, coord, step: float, stencil: int = 5) -> float:
    """Central-difference derivative of ``f`` along one coordinate.

    ``stencil=3`` is the two-evaluation rule; ``stencil=5`` is the fourth-order
    rule using offsets +-h and +-2h.
    """
    x = point.copy()
    orig = x[coord]

    def at(offset):
        x[coord] = orig + offset
        return f(x)

    if stencil == 3:
        return (at(step) - at(-step)) / (2.0 * step)
    if stencil == 5:
        return (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step)
    raise ValueError("stencil must be 3 or 5")


def grad_check(build: Callable[[Tensor], Tensor], point, fd_step: float = 1e-5, stencil: int = 5) -> float:
    """Max relative error between backprop and central differences.

    ``build`` maps a leaf tensor holding ``point`` to a scalar tensor. The error
    per coordinate is ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    point = np.array(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(point))[0])
        raise NonFiniteError(f"non-finite input at {bad}", bad)
    leaf = Tensor(point.copy())
    backward(build(leaf))
    analytic = leaf.grad.copy()
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        raise NonFiniteError(f"non-finite analytic gradient at {bad}", bad)

    def f(x):
        return build(constant(x)).item()

    numeric = np.zeros_like(point)
    for coord in np.ndindex(point.shape):
        numeric[coord] = central_difference(f, point, coord, fd_step, stencil)
        if not np.isfinite(numeric[coord]):
            raise NonFiniteError(f"non-finite loss when perturbing {coord}", coord)

    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
