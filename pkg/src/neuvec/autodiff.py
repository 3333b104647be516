"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` records the operation that produced it; ``backward()`` sorts
the recorded graph topologically and runs each node's local adjoint rule
exactly once, in reverse order.  Broadcasting in binary ops is undone on the
way back by summing over the broadcast axes.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tensor:
    """Array value with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Stored as float64.
    requires_grad : bool
        Leaves with ``requires_grad`` accumulate ``.grad`` on backward.
    """

    __array_priority__ = 100  # make ndarray + Tensor dispatch to Tensor

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- graph traversal -------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        # interior nodes hold transient adjoints; leaves keep theirs
        adj = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in adj:
                    adj[id(parent)] = adj[id(parent)] + pg
                else:
                    adj[id(parent)] = pg

    # -- construction helpers --------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def _make(self, data, parents, backward, op):
        out = Tensor(data, _parents=parents, _op=op)
        if out.requires_grad:
            out._backward = backward
        return out

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self._make(a.data + b.data, (a, b), lambda g: (
            (a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))), "add")

    __radd__ = __add__

    def __neg__(self):
        a = self
        return self._make(-a.data, (a,), lambda g: ((a, -g),), "neg")

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self._make(a.data - b.data, (a, b), lambda g: (
            (a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))), "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self._make(a.data * b.data, (a, b), lambda g: (
            (a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data / b.data
        return self._make(out, (a, b), lambda g: (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * out / b.data, b.shape))), "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        return self._make(a.data ** p, (a,), lambda g: ((a, g * p * a.data ** (p - 1)),), "pow")

    # -- linear algebra and shape ops ------------------------------------

    def __matmul__(self, other):
        """``x (..., k) @ W (k, h)``; ``W`` must be two-dimensional."""
        other = self._lift(other)
        a, w = self, other
        if w.ndim != 2:
            raise ValueError("right operand of @ must be a matrix")
        k, h = w.shape
        a2 = a.data.reshape(-1, k)  # one flat GEMM instead of a batched matmul

        def backward(g):
            g2 = g.reshape(-1, h)
            return (a, (g2 @ w.data.T).reshape(a.shape)), (w, a2.T @ g2)

        out = (a2 @ w.data).reshape(a.shape[:-1] + (h,))
        return self._make(out, (a, w), backward, "matmul")

    def dense(self, W, b, activation=None):
        """Fused ``act(x @ W + b)``; same result as the elementary ops, fewer temporaries."""
        a, W, b = self, self._lift(W), self._lift(b)
        k, h = W.shape
        x2 = a.data.reshape(-1, k)
        z = x2 @ W.data
        z += b.data
        if activation is None:
            out = z
        elif activation == "tanh":
            out = np.tanh(z, out=z)
        else:
            raise ValueError(f"fused dense supports tanh or identity, got {activation!r}")

        def backward(g):
            gz = g.reshape(-1, h)
            if activation == "tanh":
                gz = gz * (1.0 - out * out)
            return ((a, (gz @ W.data.T).reshape(a.shape)), (W, x2.T @ gz), (b, gz.sum(axis=0)))

        return self._make(out.reshape(a.shape[:-1] + (h,)), (a, W, b), backward, "dense")

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, a.shape)),)

        return self._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return self._make(a.data.reshape(*shape), (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")

    def __getitem__(self, idx):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return ((a, full),)

        return self._make(a.data[idx], (a,), backward, "index")

    def broadcast_to(self, shape):
        a = self
        return self._make(np.broadcast_to(a.data, shape), (a,),
                          lambda g: ((a, _unbroadcast(g, a.shape)),), "broadcast")

    # -- nonlinearities --------------------------------------------------

    def tanh(self):
        a = self
        t = np.tanh(a.data)
        return self._make(t, (a,), lambda g: ((a, g * (1.0 - t * t)),), "tanh")

    def exp(self):
        a = self
        e = np.exp(a.data)
        return self._make(e, (a,), lambda g: ((a, g * e),), "exp")

    def log(self):
        a = self
        return self._make(np.log(a.data), (a,), lambda g: ((a, g / a.data),), "log")

    def softplus(self):
        a = self
        return self._make(np.logaddexp(0.0, a.data), (a,), lambda g: ((a, g * _sigmoid(a.data)),), "softplus")

    def relu(self):
        a = self
        mask = a.data > 0
        return self._make(a.data * mask, (a,), lambda g: ((a, g * mask),), "relu")

    def sigmoid(self):
        a = self
        s = _sigmoid(a.data)
        return self._make(s, (a,), lambda g: ((a, g * s * (1.0 - s)),), "sigmoid")


def concat(tensors, axis=-1):
    """Concatenate tensors along ``axis``."""
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, sizes, axis=axis)))

    out = Tensor(data, _parents=tuple(tensors), _op="concat")
    if out.requires_grad:
        out._backward = backward
    return out


ACTIVATIONS = {
    "tanh": Tensor.tanh,
    "relu": Tensor.relu,
    "sigmoid": Tensor.sigmoid,
    "softplus": Tensor.softplus,
}
