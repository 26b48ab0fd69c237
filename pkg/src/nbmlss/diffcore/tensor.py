"""Reverse-mode automatic differentiation on dense float64 arrays.

This is a deliberately small tape: the networks built on top of it only need
affine maps, ReLU, dropout, a handful of elementwise transcendentals and
reductions.  Every operation records vector-Jacobian products against its
inputs; calling :meth:`Tensor.backward` on a scalar loss walks the recorded
graph in reverse topological order and accumulates gradients into the
trainable leaves.

All arithmetic is performed in 64-bit floating point.  Gradients of repeated
``backward`` calls accumulate until :meth:`Parameter.zero_grad` (or the
optimizer) clears them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from ..errors import StateError

__all__ = ["Tensor", "Parameter", "as_tensor", "concat"]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that were broadcast so it matches `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x) -> "Tensor":
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """A float64 array plus the recording needed to differentiate through it."""

    # keep numpy from hijacking mixed expressions like `ndarray * Tensor`
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _vjps: Sequence[tuple["Tensor", Callable[[np.ndarray], np.ndarray]]] = ()):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self._vjps = tuple(_vjps)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p, _ in self._vjps)

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph construction helpers
    # ------------------------------------------------------------------
    def _unary(self, out_values: np.ndarray, vjp: Callable[[np.ndarray], np.ndarray]) -> "Tensor":
        return Tensor(out_values, _vjps=((self, vjp),))

    @staticmethod
    def _binary(a, b, fwd, vjp_a, vjp_b) -> "Tensor":
        a, b = as_tensor(a), as_tensor(b)
        out = fwd(a.values, b.values)
        vjps = []
        if a.requires_grad:
            vjps.append((a, lambda g: _unbroadcast(vjp_a(g, a.values, b.values), a.values.shape)))
        if b.requires_grad:
            vjps.append((b, lambda g: _unbroadcast(vjp_b(g, a.values, b.values), b.values.shape)))
        return Tensor(out, _vjps=vjps)

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other):
        return Tensor._binary(self, other, lambda a, b: a + b,
                              lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return Tensor._binary(self, other, lambda a, b: a - b,
                              lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return Tensor._binary(other, self, lambda a, b: a - b,
                              lambda g, a, b: g, lambda g, a, b: -g)

    def __mul__(self, other):
        return Tensor._binary(self, other, lambda a, b: a * b,
                              lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Tensor._binary(self, other, lambda a, b: a / b,
                              lambda g, a, b: g / b,
                              lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return Tensor._binary(other, self, lambda a, b: a / b,
                              lambda g, a, b: g / b,
                              lambda g, a, b: -g * a / (b * b))

    def __neg__(self):
        return self._unary(-self.values, lambda g: -g)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        c = float(exponent)
        x = self.values
        return self._unary(x ** c, lambda g: g * c * x ** (c - 1.0))

    def __matmul__(self, other):
        return Tensor._binary(self, other, lambda a, b: a @ b,
                              lambda g, a, b: g @ b.T,
                              lambda g, a, b: a.T @ g)

    def __rmatmul__(self, other):
        return Tensor._binary(other, self, lambda a, b: a @ b,
                              lambda g, a, b: g @ b.T,
                              lambda g, a, b: a.T @ g)

    # ------------------------------------------------------------------
    # elementwise transcendentals
    # ------------------------------------------------------------------
    def relu(self):
        x = self.values
        mask = x > 0  # subgradient 0 at the kink, fixed convention
        return self._unary(np.where(mask, x, 0.0), lambda g: g * mask)

    def exp(self):
        out = np.exp(self.values)
        return self._unary(out, lambda g: g * out)

    def log(self):
        x = self.values
        return self._unary(np.log(x), lambda g: g / x)

    def log1p(self):
        x = self.values
        return self._unary(np.log1p(x), lambda g: g / (1.0 + x))

    def sqrt(self):
        out = np.sqrt(self.values)
        return self._unary(out, lambda g: g / (2.0 * out))

    def asinh(self):
        x = self.values
        return self._unary(np.arcsinh(x), lambda g: g / np.sqrt(1.0 + x * x))

    def softplus(self):
        x = self.values
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return self._unary(out, lambda g: g * special.expit(x))

    def gammaln(self):
        x = self.values
        return self._unary(special.gammaln(x), lambda g: g * special.digamma(x))

    # ------------------------------------------------------------------
    # shape ops and reductions
    # ------------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.values.shape
        return self._unary(self.values.reshape(shape), lambda g: g.reshape(orig))

    def __getitem__(self, key):
        # only basic (slice-based) indexing is supported: sources never overlap,
        # so the adjoint is a plain slice-assignment into zeros
        out = self.values[key]
        shape = self.values.shape

        def vjp(g):
            buf = np.zeros(shape, dtype=np.float64)
            buf[key] += g
            return buf

        return self._unary(out, vjp)

    def sum(self, axis=None, keepdims: bool = False):
        x_shape = self.values.shape
        out = self.values.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, x_shape).copy() if np.ndim(g) else np.full(x_shape, g)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(g_exp, x_shape).copy()

        return self._unary(out, vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.values.size if axis is None else np.prod(
            [self.values.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every trainable leaf's ``.grad``."""
        if not self.requires_grad:
            raise StateError(
                "backward called before any forward pass involving trainable parameters")
        if grad is None:
            if self.values.size != 1:
                raise StateError("implicit backward requires a scalar loss")
            grad = np.ones_like(self.values)

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._vjps:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        flowing: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjps:
                for parent, vjp in node._vjps:
                    if not parent.requires_grad:
                        continue
                    contrib = vjp(g)
                    key = id(parent)
                    if key in flowing:
                        flowing[key] = flowing[key] + contrib
                    else:
                        flowing[key] = contrib
            else:
                node.grad = g if node.grad is None else node.grad + g


class Parameter(Tensor):
    """A named trainable leaf with a persistent gradient accumulator."""

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.values)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`, splitting gradients back apart."""
    parts = [as_tensor(t) for t in tensors]
    out = np.concatenate([p.values for p in parts], axis=axis)
    vjps = []
    offset = 0
    for p in parts:
        width = p.values.shape[axis]
        start, stop = offset, offset + width
        idx = tuple(slice(None) for _ in range(axis)) + (slice(start, stop),)
        if p.requires_grad:
            vjps.append((p, lambda g, idx=idx: g[idx]))
        offset = stop
    return Tensor(out, _vjps=vjps)
