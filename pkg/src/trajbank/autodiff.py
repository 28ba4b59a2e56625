"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Tensor` records the operation that produced it; calling
:meth:`Tensor.backward` on a scalar walks the tape in reverse
topological order and accumulates gradients into every tensor created
with ``requires_grad=True``.  Operations whose inputs all have
``requires_grad=False`` produce constants and record nothing, so the
same forward code serves both training and inference.

Broadcasting follows numpy; gradients of broadcast operands are summed
back to the operand's shape.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(value, parents, backward):
        out = Tensor(value)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self) -> None:
        """Accumulate gradients of this scalar into the whole tape."""
        if self.value.size != 1:
            raise ValueError(
                f"backward() requires a scalar root, got shape {self.value.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    value = a.value + b.value

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.value.shape))

    return Tensor._result(value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    value = a.value * b.value

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.value, b.value.shape))

    return Tensor._result(value, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    value = a.value @ b.value

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ grad)

    return Tensor._result(value, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad.T)

    return Tensor._result(a.value.T, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    value = np.exp(a.value)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * value)

    return Tensor._result(value, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)
    value = np.log(a.value)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad / a.value)

    return Tensor._result(value, (a,), backward)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.value > 0
    value = np.where(mask, a.value, 0.0)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * mask)

    return Tensor._result(value, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        if not a.requires_grad:
            return
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    return Tensor._result(value, (a,), backward)


def tmean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def take(a, key) -> Tensor:
    """Indexing/slicing; gradients scatter-add back into place."""
    a = _lift(a)
    value = a.value[key]

    def backward(grad):
        if a.requires_grad:
            g = np.zeros_like(a.value)
            np.add.at(g, key, grad)
            a._accumulate(g)

    return Tensor._result(value, (a,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)

    def backward(grad):
        pieces = np.moveaxis(grad, axis, 0)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._result(value, tuple(tensors), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)

    def backward(grad):
        offset = 0
        for t in tensors:
            width = t.value.shape[axis]
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(offset, offset + width)
            if t.requires_grad:
                t._accumulate(grad[tuple(sl)])
            offset += width

    return Tensor._result(value, tuple(tensors), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp along one axis.

    The subtracted maximum is treated as a constant, which leaves the
    value exact and the gradient equal to the softmax of ``a``.
    """
    a = _lift(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = add(a, Tensor(-m))
    return add(log(tsum(exp(shifted), axis=axis)), Tensor(np.squeeze(m, axis=axis)))


def normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Project rows onto the unit sphere.

    Rows with norm below ``eps`` map to the first basis vector and get
    zero gradient.  For the rest the Jacobian is ``(I - u u^T) / ||x||``.
    """
    a = _lift(a)
    x = np.atleast_2d(a.value)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = norms >= eps
    denom = np.where(safe, norms, 1.0)
    unit = x / denom
    fallback = np.zeros_like(x)
    fallback[:, 0] = 1.0
    value = np.where(safe, unit, fallback)
    if a.value.ndim == 1:
        value = value[0]

    def backward(grad):
        if not a.requires_grad:
            return
        g = np.atleast_2d(grad)
        proj = g - np.sum(g * value.reshape(x.shape), axis=1, keepdims=True) * value.reshape(x.shape)
        out = np.where(safe, proj / denom, 0.0)
        a._accumulate(out.reshape(a.value.shape))

    return Tensor._result(value, (a,), backward)


def collect_gradients(loss: Tensor, named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward from a scalar loss and return gradients by name.

    Tensors that received no gradient (unused in the graph) map to
    zeros of their shape.
    """
    for t in named.values():
        t.grad = None
    loss.backward()
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for name, t in named.items()
    }
