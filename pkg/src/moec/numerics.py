"""Dense 2-D tensors with a reverse-mode gradient tape.

Every value is a float64 matrix.  Operations executed inside a ``Tape``
context append a record to it; ``backward`` walks those records once, in
reverse order, and returns the gradient of a scalar root with respect to
every tensor that took part.

    >>> x = Tensor([[2.0]], requires_grad=True)
    >>> y = Tensor([[3.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     z = mul(x, y)
    >>> grads = backward(tape, z)
    >>> float(grads[x][0, 0]), float(grads[y][0, 0])
    (3.0, 2.0)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "sqrt",
    "square",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "max",
    "broadcast",
    "transpose",
    "reshape",
    "concat",
    "select_columns",
    "select_rows",
    "take",
    "stop_gradient",
    "backward",
    "finite_difference_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class Tensor:
    """A 2-D float64 value, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # hashing by identity so tensors can key gradient dicts
    __hash__ = object.__hash__

    def __eq__(self, other):  # pragma: no cover - identity semantics
        return self is other

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

    @property
    def T(self):
        return transpose(self)


@dataclass(frozen=True)
class _Record:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "moec_active_tape", default=None
)


class Tape:
    """Ordered log of primitive operations.

    Use as a context manager; operations run while it is active are
    recorded.  Tapes are single-writer; build independent tapes on separate
    threads if needed (the active tape is a context variable).
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _emit(op: str, values: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(values, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    tape = _ACTIVE.get()
    if tape is not None and needs:
        tape.records.append(_Record(op, out, tuple(inputs), vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # reduce a broadcast gradient back to the operand's (rows, cols)
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(
        "add",
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(
        "sub",
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _emit(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, a.shape),
            _unbroadcast(-g * out / bv, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.values, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python constant."""
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    if np.any(av <= 0):
        raise ContractError("log: non-positive input")
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise ContractError("sqrt: negative input")
    out = np.sqrt(a.values)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.values > 0
    return _emit("relu", np.where(on, a.values, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    # split by sign so neither branch overflows
    pos = av >= 0
    ez = np.exp(-np.abs(av))
    out = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        out = a.values.sum().reshape(1, 1)
    else:
        out = a.values.sum(axis=axis, keepdims=True)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.values.size if axis is None else shape[axis]
    if axis is None:
        out = a.values.mean().reshape(1, 1)
    else:
        out = a.values.mean(axis=axis, keepdims=True)
    return _emit("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def max(a, axis: int | None = None) -> Tensor:
    """Maximum; the subgradient goes to the first (lowest-index) maximiser."""
    a = as_tensor(a)
    av = a.values
    if axis is None:
        flat = int(np.argmax(av))
        r, c = divmod(flat, av.shape[1])
        out = av[r, c].reshape(1, 1)

        def vjp(g):
            gx = np.zeros_like(av)
            gx[r, c] = g[0, 0]
            return (gx,)

    else:
        idx = np.argmax(av, axis=axis)
        if axis == 1:
            rows = np.arange(av.shape[0])
            out = av[rows, idx].reshape(-1, 1)

            def vjp(g):
                gx = np.zeros_like(av)
                gx[rows, idx] = g[:, 0]
                return (gx,)

        else:
            cols = np.arange(av.shape[1])
            out = av[idx, cols].reshape(1, -1)

            def vjp(g):
                gx = np.zeros_like(av)
                gx[idx, cols] = g[0, :]
                return (gx,)

    return _emit("max", out, (a,), vjp)


def broadcast(a, shape: tuple[int, int]) -> Tensor:
    a = as_tensor(a)
    for da, ds in zip(a.shape, shape):
        if da != ds and da != 1:
            raise DimensionError(f"broadcast: {a.shape} -> {shape}")
    src = a.shape
    out = np.broadcast_to(a.values, shape).copy()
    return _emit("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    if shape[0] * shape[1] != a.values.size:
        raise DimensionError(f"reshape: {src} -> {shape}")
    return _emit("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    other = 1 - axis
    if len({t.shape[other] for t in ts}) != 1:
        raise DimensionError(f"concat: mismatched shapes {[t.shape for t in ts]}")
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.values for t in ts], axis=axis)
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def select_columns(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _emit("select", a.values[:, idx], (a,), vjp)


def select_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("select", a.values[idx, :], (a,), vjp)


def take(a, rows, cols) -> Tensor:
    """Gather ``a[rows[k], cols[k]]`` into a column vector."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, (rows, cols), g[:, 0])
        return (gx,)

    return _emit("select", a.values[rows, cols].reshape(-1, 1), (a,), vjp)


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.values)


# ---------------------------------------------------------------- reverse pass


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` for every tensor touched on ``tape``.

    Leaves that were created with ``requires_grad=True`` also get the result
    accumulated into their ``.grad`` slot.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[Tensor, np.ndarray] = {root: np.ones((1, 1))}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(rec.output)
        g = grads.get(rec.output)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    for t, g in grads.items():
        if t not in produced and t is not root:
            t.grad = g if t.grad is None else t.grad + g
    return grads


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    point,
    grad,
    h: float = 1e-6,
) -> float:
    """Max relative error between ``grad`` and a central difference of ``f``.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x = np.array(point, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        err = abs(gflat[i] - num) / np.maximum(1.0, abs(num))
        worst = np.maximum(worst, err)
    return float(worst)
