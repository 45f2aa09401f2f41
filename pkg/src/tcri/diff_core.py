"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`; calling
:func:`backward` replays the tape in reverse and accumulates gradients.
Outside a tape, operations are evaluated eagerly without recording.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape)[w]
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "as_tensor",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum",
    "mean",
    "concat",
    "take_rows",
    "slice_cols",
    "transpose",
    "reshape",
    "l2norm",
    "grad_of_grad_norm",
    "custom_op",
]


class ShapeError(ValueError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """A float64 array with an optional gradient requirement."""

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _result(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal constructor: no copy, no finiteness scan
        t = cls.__new__(cls)
        t.value = value
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor._result(self.value, False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __array_priority__ = 100

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so inputs always precede the
    operations consuming them. Tapes nest; operations record on the innermost.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _record(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._result(value, needs)
    stack = _tape_stack()
    if needs and stack:
        stack[-1].nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def custom_op(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Record a fused primitive: ``vjp(g)`` returns one gradient per input."""
    return _record(np.asarray(value, dtype=np.float64), tuple(inputs), vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` recorded on ``tape``.

    With ``wrt`` given, every listed tensor gets an entry (zeros when it did
    not influence the loss). Otherwise all requires_grad leaves reached by the
    tape are returned. Tensors with requires_grad=False receive nothing.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        contribs = node.vjp(g)
        for inp, c in zip(node.inputs, contribs):
            if c is None or not inp.requires_grad:
                continue
            key = id(inp)
            leaves.setdefault(key, inp)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
    if wrt is not None:
        return {t: grads.get(id(t), np.zeros_like(t.value)) for t in wrt}
    if loss.requires_grad and id(loss) in grads and id(loss) not in produced:
        leaves[id(loss)] = loss
    return {t: grads[k] for k, t in leaves.items() if k not in produced and k in grads}


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = av / bv
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    v = a.value
    return _record(np.logaddexp(0.0, v), (a,), lambda g: (g * _sigmoid(v),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    if np.any(v <= 0):
        raise ValueError("log of non-positive value")
    return _record(np.log(v), (a,), lambda g: (g / v,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    if np.any(v < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(v)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _record(out, (a,), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    return _record(v * v, (a,), lambda g: (2.0 * g * v,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record(a.value.sum(axis=ax), (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean of empty tensor")
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; this is the representation join of the heads."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    try:
        out = np.concatenate([t.value for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _record(out, ts, vjp)


def take_rows(a, index) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(index)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.value[idx], (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"bad column slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(a.value[:, start:stop], (a,), vjp)


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(np.array(a.value[idx]), (a,), vjp)


def l2norm(a, squared: bool = False) -> Tensor:
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    a = as_tensor(a)
    if squared:
        return sum(square(a))
    v = a.value
    nrm = float(np.sqrt(np.sum(v * v)))

    def vjp(g):
        if nrm == 0.0:
            return (np.zeros_like(v),)
        return (g * v / nrm,)

    return _record(np.asarray(nrm), (a,), vjp)


def grad_of_grad_norm(
    risk_fn: Callable[[Tensor], Tensor],
    theta: Tensor,
    upstream: Sequence[Tensor],
    squared: bool = False,
    step: float = 1e-5,
) -> tuple[float, dict[Tensor, np.ndarray]]:
    """Value of ``||grad_theta risk||`` and its gradient w.r.t. ``upstream``.

    Generic fallback for heads without a closed-form gradient. The upstream
    gradient of the norm is ``J^T u`` with ``J = d(grad_theta)/d(upstream)``
    and ``u`` the unit gradient direction, which equals the upstream gradient
    of the directional derivative of the risk along ``u``. That directional
    derivative is taken by a central difference in ``theta`` (error O(step^2)),
    so only first-order reverse passes are needed.
    """
    if theta.requires_grad is False:
        theta = Tensor._result(theta.value, True)
    with Tape() as tape:
        r = risk_fn(theta)
    g = backward(r, tape, wrt=[theta])[theta]
    nrm = float(np.sqrt(np.sum(g * g)))
    value = nrm * nrm if squared else nrm
    if nrm == 0.0 and not squared:
        return 0.0, {p: np.zeros_like(p.value) for p in upstream}
    direction = 2.0 * g if squared else g / nrm
    unit = float(np.sqrt(np.sum(direction * direction)))
    if unit == 0.0:
        return value, {p: np.zeros_like(p.value) for p in upstream}
    u = direction / unit
    h = step * max(1.0, float(np.sqrt(np.sum(theta.value**2))))
    fixed_plus = Tensor._result(theta.value + h * u, False)
    fixed_minus = Tensor._result(theta.value - h * u, False)
    with Tape() as tape:
        d = scale(sub(risk_fn(fixed_plus), risk_fn(fixed_minus)), unit / (2.0 * h))
    return value, backward(d, tape, wrt=upstream)
