"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Each op records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order. Broadcasting follows numpy; gradients are summed back
to the operand shapes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer))
               for p in parts)


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        ra, rb = self.requires_grad, other.requires_grad
        return Tensor._make(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a) if ra else None,
                       _unbroadcast(g, b) if rb else None),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        ra, rb = self.requires_grad, other.requires_grad
        return Tensor._make(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a) if ra else None,
                       _unbroadcast(-g, b) if rb else None),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        rx, ry = self.requires_grad, other.requires_grad
        return Tensor._make(
            x * y, (self, other),
            lambda g: (_unbroadcast(g * y, x.shape) if rx else None,
                       _unbroadcast(g * x, y.shape) if ry else None),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        rx, ry = self.requires_grad, other.requires_grad
        return Tensor._make(
            x / y, (self, other),
            lambda g: (_unbroadcast(g / y, x.shape) if rx else None,
                       _unbroadcast(-g * x / (y * y), y.shape) if ry else None),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor._make(
            x ** exponent, (self,),
            lambda g: (g * exponent * x ** (exponent - 1),),
        )

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self):
        keep = self.data > 0
        return Tensor._make(np.where(keep, self.data, 0.0), (self,), lambda g: (g * keep,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def swapaxes(self, a: int, b: int):
        return Tensor._make(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, index):
        shape = self.shape

        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)

    # -- linear algebra -------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if ra else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if rb else None
        return ga, gb

    return Tensor._make(x @ y, (a, b), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [t.reshape(t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def where(cond: np.ndarray, x, y) -> Tensor:
    """Select ``x`` where ``cond`` holds, else ``y``; ``cond`` is a constant mask."""
    x, y = as_tensor(x), as_tensor(y)
    cond = np.asarray(cond, dtype=bool)
    xs, ys = x.shape, y.shape
    rx, ry = x.requires_grad, y.requires_grad
    return Tensor._make(
        np.where(cond, x.data, y.data), (x, y),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), xs) if rx else None,
                   _unbroadcast(np.where(cond, 0.0, g), ys) if ry else None),
    )


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.data)
    return Tensor._make(out, (x,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), x.shape),))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax over the last axis; ``-inf`` entries come out as exact zeros."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    data = x.data
    top = data.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(top)):
        raise ValueError("softmax row with every entry masked (no valid key)")
    e = np.exp(data - top)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = x.data
    shifted = data - data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked rows.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` match the leading
    shape. Masked-out rows contribute neither loss nor gradient.
    """
    logits = as_tensor(logits)
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    targets = np.asarray(targets).reshape(-1)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.shape[0] != targets.shape[0]:
        raise ShapeError("targets do not match logits")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy over zero unmasked positions")
    safe_targets = np.where(mask, targets, 0)
    if np.any((safe_targets < 0) | (safe_targets >= vocab)):
        raise ValueError("target index out of range")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(flat.shape[0])
    nll = -logp[rows, safe_targets]
    loss = float((nll * mask).sum() / count)
    shape = logits.shape

    def backward(g):
        grad = np.exp(logp)
        grad[rows, safe_targets] -= 1.0
        grad *= (mask / count)[:, None] * g
        return (grad.reshape(shape),)

    return Tensor._make(np.array(loss), (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + shift


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
