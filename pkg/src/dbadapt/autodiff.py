"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the transformer, the distillation losses and the side
adapter need are implemented.  Every node records the name of the
operation that produced it, which lets tests walk a graph and check that an
approximated model only uses additions, multiplications and affine maps.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# ops an FHE-friendly graph may contain
POLYNOMIAL_OPS = frozenset(
    {"leaf", "add", "sub", "neg", "mul", "matmul", "sum", "reshape", "transpose", "take", "getitem"}
)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __array_ufunc__ = None
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents: Sequence = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        # (parent, vjp) pairs; only parents that need gradients are kept
        self._parents = tuple(parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # graph construction
    @staticmethod
    def _make(data, op: str, inputs: Iterable[tuple["Tensor", Callable]]) -> "Tensor":
        parents = [(t, fn) for t, fn in inputs if isinstance(t, Tensor) and t.requires_grad]
        return Tensor(data, requires_grad=bool(parents), op=op, parents=parents)

    def __add__(self, other):
        o = as_tensor(other)
        return Tensor._make(
            self.data + o.data,
            "add",
            [(self, lambda g: _unbroadcast(g, self.shape)), (o, lambda g: _unbroadcast(g, o.shape))],
        )

    __radd__ = __add__

    def __sub__(self, other):
        o = as_tensor(other)
        return Tensor._make(
            self.data - o.data,
            "sub",
            [(self, lambda g: _unbroadcast(g, self.shape)), (o, lambda g: -_unbroadcast(g, o.shape))],
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, "neg", [(self, lambda g: -g)])

    def __mul__(self, other):
        o = as_tensor(other)
        return Tensor._make(
            self.data * o.data,
            "mul",
            [
                (self, lambda g: _unbroadcast(g * o.data, self.shape)),
                (o, lambda g: _unbroadcast(g * self.data, o.shape)),
            ],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / np.asarray(other, dtype=np.float64))
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return as_tensor(other) * self.reciprocal()

    def __matmul__(self, other):
        o = as_tensor(other)
        a, b = self.data, o.data
        return Tensor._make(
            a @ b,
            "matmul",
            [
                (self, lambda g: _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)),
                (o, lambda g: _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)),
            ],
        )

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __pow__(self, exponent):
        e = float(exponent)
        x = self.data
        op = "mul" if e == 2.0 else "pow"
        return Tensor._make(x**e, op, [(self, lambda g: g * e * x ** (e - 1.0))])

    def __getitem__(self, index):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return out

        return Tensor._make(self.data[index], "getitem", [(self, vjp)])

    # reductions and data movement
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), "sum", [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), "reshape", [(self, lambda g: g.reshape(old))])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), "transpose", [(self, lambda g: g.transpose(inv))])

    def swapaxes(self, a, b):
        return Tensor._make(self.data.swapaxes(a, b), "transpose", [(self, lambda g: g.swapaxes(a, b))])

    def take(self, indices, axis=0):
        idx = np.asarray(indices)
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            moved = np.moveaxis(out, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            return out

        return Tensor._make(np.take(self.data, idx, axis=axis), "take", [(self, vjp)])

    # non-polynomial elementwise functions (exact models and losses only)
    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, "exp", [(self, lambda g: g * y)])

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), "log", [(self, lambda g: g / x)])

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._make(y, "sqrt", [(self, lambda g: g * 0.5 / y)])

    def reciprocal(self):
        y = 1.0 / self.data
        return Tensor._make(y, "reciprocal", [(self, lambda g: -g * y * y)])

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return Tensor._make(x * cdf, "gelu", [(self, lambda g: g * (cdf + x * pdf))])

    # backward pass
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient requires a scalar output")
            grad = np.ones(self.shape)
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def topological_order(root: Tensor) -> list[Tensor]:
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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def graph_ops(root: Tensor) -> set[str]:
    """Names of all operations reachable from ``root`` through tracked parents."""
    return {node.op for node in topological_order(root)}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * p.grad
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * p.grad**2
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
