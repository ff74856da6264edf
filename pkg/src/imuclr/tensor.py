"""Reverse-mode differentiable arrays over float64 numpy storage.

Operations record themselves on the innermost active `Tape`; `Tape.backward`
replays the records in exact reverse append order, which is a valid reverse
topological order because an operation's inputs always precede its output.
Outside any tape context the same functions run as plain (cheap) forward
computations.

Only the operations the encoder and the contrastive losses need are
provided; everything is float64 so finite-difference checking is reliable.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray
_VJP = Callable[[Array], Sequence["Array | None"]]


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data that does not participate in gradients."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; scalars and arrays are promoted to constant tensors.
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager around the forward computation, then call
    `backward(loss)`. Gradients accumulate into the `.grad` field of every
    leaf tensor with `requires_grad=True`; re-running `backward` after a
    grad reset replays the identical record sequence and therefore yields
    bit-identical gradients.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], _VJP]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        Tape._stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
        produced = {id(out) for out, _, _ in self._records}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, gi in zip(inputs, vjp(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        seen: set[int] = set()
        for _, inputs, _ in self._records:
            for tensor in inputs:
                key = id(tensor)
                if key in produced or key in seen or not tensor.requires_grad:
                    continue
                seen.add(key)
                g = grads.get(key)
                if g is None:
                    continue
                g = np.asarray(g, dtype=np.float64).reshape(tensor.data.shape)
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def _record(data: Array, inputs: tuple[Tensor, ...], vjp: _VJP) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = Tape.active()
    if requires and tape is not None:
        tape._records.append((out, inputs, vjp))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: Array):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: Array):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _record(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _record(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return _record(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: axis 1 of {a.shape} vs axis 0 of {b.shape}"
        )

    def vjp(g: Array):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return _record(out_data, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_advanced_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def index(a, key) -> Tensor:
    """Numpy indexing (basic or advanced); backward scatter-adds.

    The result is materialized contiguous: strided views would knock
    downstream matmuls off the BLAS fast path. Advanced keys may select a
    position twice, so their backward goes through the unbuffered add.
    """
    a = as_tensor(a)
    advanced = _is_advanced_key(key)

    def vjp(g: Array):
        out = np.zeros_like(a.data)
        if advanced:
            np.add.at(out, key, g)
        else:
            out[key] += g
        return (out,)

    return _record(np.ascontiguousarray(a.data[key]), (a,), vjp)


def take_rows(a, rows: Array) -> Tensor:
    """Gather rows of a 2-d tensor by integer index."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-d tensor, got shape {a.shape}")
    return index(a, (np.asarray(rows, dtype=np.intp),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g: Array):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return _record(out_data, tensors, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out_data, tensors, vjp)
