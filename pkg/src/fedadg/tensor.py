"""Small reverse-mode autodiff over float64 numpy arrays.

Every operation builds a node holding its inputs and a local backward rule.
Shapes must match exactly; there is no implicit broadcasting. Use
:func:`tile_rows` to repeat a bias vector over a batch.

Gradients accumulate into leaf tensors across repeated :meth:`Tensor.backward`
calls until they are cleared with :func:`zero_grad` (or by :func:`sgd_step`).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# per thread: clients of one round may train concurrently
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''} of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(f"operation produced a non-finite value (shape {data.shape})")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
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

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return Tensor._result(A @ B, (a, b), backward)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        c = float(a)
        return Tensor._result(c - b.data, (b,), lambda g: (-g,))
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return Tensor._result(A * B, (a, b), lambda g: (g * B, g * A))


def square(a: Tensor) -> Tensor:
    A = a.data
    return Tensor._result(A * A, (a,), lambda g: (2.0 * A * g,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return Tensor._result(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return Tensor._result(np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    ex = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax expects [batch, classes], got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._result(s, (a,), backward)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    A = a.data
    return Tensor._result(np.log(A), (a,), lambda g: (g / A,))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    mask = a.data > floor
    return Tensor._result(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ {tensors[0].shape} vs {t.shape}")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    out = np.concatenate([t.data for t in tensors], axis=-1)
    return Tensor._result(out, tuple(tensors), backward)


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Stack a 1-D tensor ``n`` times into shape [n, len(a)]."""
    if a.data.ndim != 1:
        raise ShapeError(f"tile_rows expects a 1-D tensor, got {a.shape}")
    return Tensor._result(np.tile(a.data, (n, 1)), (a,), lambda g: (g.sum(axis=0),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain SGD: ``p <- p - lr * grad``, then clear the grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
    for p in params:
        update = p.data - lr * p.grad
        if not np.isfinite(update).all():
            raise NonFiniteError(f"sgd_step produced a non-finite value in {p.name or p.shape}")
        p.data = update
        p.grad = None
