"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the alignment and refinement losses need: broadcasting
arithmetic, 2-D matmul, row softmax / logsumexp, relu, softplus, sqrt,
basic indexing and stacking. Build a graph of ``Var`` nodes, call
``backward`` on a scalar, read ``.grad`` off the leaves. Graphs are
throwaway: wrap fresh ``Var``s around the current parameter arrays for
every loss evaluation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """One node of the tape: a float64 array plus the vjp into its parents."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents: tuple["Var", ...] = (), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b) -> Var:
    a, b = lift(a), lift(b)
    out = a.value / b.value
    return Var(out, (a, b), lambda g: (g / b.value, -g * out / b.value))


def matmul(a, b) -> Var:
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Var:
    a = lift(a)
    return Var(a.value.T, (a,), lambda g: (g.T,))


def exp(a) -> Var:
    a = lift(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = lift(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Var:
    a = lift(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Var:
    a = lift(a)
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Var:
    a = lift(a)
    out = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return Var(out, (a,), lambda g: (g * sig,))


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape),)

    return Var(out, (a,), vjp)


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = lift(a)
    denom = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


def softmax(a, axis: int = -1) -> Var:
    a = lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Var(out, (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Var:
    a = lift(a)
    m = a.value.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    soft = np.exp(a.value - out)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (soft * gg,)

    return Var(out, (a,), vjp)


def index(a, key) -> Var:
    a = lift(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return Var(a.value[key], (a,), vjp)


def take_diag(a) -> Var:
    a = lift(a)
    n = a.value.shape[0]
    idx = np.arange(n)
    return index(a, (idx, idx))


def vstack(rows: Sequence[Var]) -> Var:
    rows = [lift(r) for r in rows]
    out = np.stack([r.value for r in rows], axis=0)

    def vjp(g):
        return tuple(g[i] for i in range(len(rows)))

    return Var(out, tuple(rows), vjp)


def reshape(a, shape) -> Var:
    a = lift(a)
    orig = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def l2_normalize(a, axis: int = -1) -> Var:
    """Rows scaled to unit L2 norm along `axis` (differentiable)."""
    norm = sqrt(vsum(mul(a, a), axis=axis, keepdims=True))
    return div(a, norm)


def stop_gradient(a) -> Var:
    a = lift(a)
    return Var(a.value.copy())


def backward(root: Var) -> None:
    """Accumulate gradients of scalar `root` into every reachable node."""
    if root.value.shape != ():
        raise ValueError("backward requires a scalar root")
    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones(())
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.value.shape)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
