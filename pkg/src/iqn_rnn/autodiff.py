"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every primitive that touches a :class:`Tensor` with ``requires_grad`` set
records itself on an implicit tape: the output keeps references to its
parents plus a closure that pushes the output gradient back to them.
:meth:`Tensor.backward` replays those closures in reverse creation order.

Only the primitives needed by a GRU with an implicit-quantile head are
provided: matmul, a handful of elementwise maps, sum/mean reductions,
concatenation, slicing and constant masks.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "tanh",
    "sigmoid",
    "softplus",
    "cos",
    "absolute",
    "maximum",
    "reduce",
    "sum",
    "mean",
    "concat",
    "gradcheck",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


_GRAD_ENABLED = True
_SEQ = itertools.count()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense real array that optionally participates in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_SEQ)
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward -------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Repeated calls accumulate. Intermediate (non-leaf) gradients are
        freed once consumed.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor requiring grad")

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        owned: set[int] = set()
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if isinstance(pg, _IndexedGrad):
                    buf = pending.get(key)
                    if buf is None:
                        buf = np.zeros_like(parent.data)
                    elif key not in owned:
                        buf = np.array(buf, copy=True)
                    pg.add_into(buf)
                    pending[key] = buf
                    owned.add(key)
                elif key in pending:
                    if key in owned:
                        pending[key] += pg
                    else:
                        pending[key] = pending[key] + pg
                        owned.add(key)
                else:
                    pending[key] = pg

    # -- operator sugar -------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- binary elementwise ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "max_with")
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "max_with")


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# -- unary elementwise -----------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at 0

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = _expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = (np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))).astype(x.dtype, copy=False)

    def backward(g):
        return (g * _expit(d),)

    return _make(out, (x,), backward, "softplus")


def cos(x: Tensor) -> Tensor:
    def backward(g):
        return (-g * np.sin(x.data),)

    return _make(np.cos(x.data), (x,), backward, "cos")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(x.data), (x,), backward, "abs")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "cos": cos,
    "abs": absolute,
    "max_with": maximum,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(_ELEMENTWISE)}") from None
    return fn(*(_lift(a) for a in args))


# -- linear algebra --------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- reductions ------------------------------------------------------------
def reduce(op: str, x: Tensor, axis: int | None = None) -> Tensor:
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {x.ndim}")
    count = x.data.size if axis is None else x.shape[axis]
    out = x.data.sum(axis=axis)
    if op == "mean":
        out = out / count
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, shape)
        if op == "mean":
            g = g / count
        return (g,)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward, op)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce("mean", x, axis)


# -- structural ------------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, tensors, backward, "concat")


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        return (_IndexedGrad(index, g),)

    return _make(np.asarray(out), (x,), backward, "slice")


class _IndexedGrad:
    """Gradient that is nonzero only on ``index`` of its parent."""

    __slots__ = ("index", "values")

    def __init__(self, index, values):
        self.index = index
        self.values = values

    def add_into(self, buf: np.ndarray) -> None:
        if _is_fancy(self.index):
            np.add.at(buf, self.index, self.values)
        else:
            buf[self.index] += self.values


def _expit(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and much faster than exp-based variants
    out = np.tanh(0.5 * x)
    out *= 0.5
    out += 0.5
    return out


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- finite-difference oracle ----------------------------------------------
def gradcheck(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    abs_floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from scratch on every call. Entries
    where both values are below ``abs_floor`` in magnitude are compared
    absolutely instead (any discrepancy of ``abs_floor`` or more is infinite
    relative error).
    """
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn().data)
                flat[i] = orig - h
                down = float(fn().data)
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                diff = abs(numeric - gflat[i])
                magnitude = max(abs(numeric), abs(gflat[i]))
                if magnitude < abs_floor:
                    # near zero: only the absolute error is meaningful
                    if diff >= abs_floor:
                        worst = max(worst, math.inf)
                    continue
                worst = max(worst, diff / magnitude)
    return worst
