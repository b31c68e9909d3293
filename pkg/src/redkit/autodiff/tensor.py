"""Reverse-mode autodiff tensor.

A ``Tensor`` wraps a numpy array and remembers how it was produced. Each op
attaches a backward closure mapping the output gradient to one gradient per
parent (``None`` where a parent needs none). ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into ``.grad``.
"""

from __future__ import annotations

import numpy as np

from redkit.errors import NonFiniteError, ShapeError

# Finite-value checking on every op output. Cheap next to the matmuls.
CHECK_FINITE = True


def check_finite(array, what="tensor"):
    if CHECK_FINITE and not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")
    return array


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @classmethod
    def from_op(cls, data, parents, backward, op=""):
        """Create the output of an op; tracks gradient only if a parent does."""
        check_finite(data, op or "op output")
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return cls(data, op=op)
        return cls(data, requires_grad=True, _parents=parents, _backward=backward, op=op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
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

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != {p.data.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # Minimal arithmetic, enough to assemble weighted loss sums.
    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        if other.shape != self.shape:
            raise ShapeError(f"add: {self.shape} vs {other.shape}")
        return Tensor.from_op(self.data + other.data, (self, other), lambda g: (g, g), op="add")

    __radd__ = __add__

    def __mul__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("only scalar multiplication is supported")
        c = float(scalar)
        return Tensor.from_op(self.data * c, (self,), lambda g: (g * c,), op="scale")

    __rmul__ = __mul__


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(array):
    """Leaf tensor that accumulates gradient."""
    return Tensor(np.array(array, copy=True), requires_grad=True)
