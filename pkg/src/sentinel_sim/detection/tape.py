"""Minimal reverse-mode differentiation over numpy arrays.

Each op records a closure that maps the output gradient to input gradients.
Only the handful of ops the recurrent detector needs are provided.
"""
from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value, needs_grad=True):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tape:
    def __init__(self):
        self._ops = []

    def leaf(self, value, needs_grad=True):
        return Node(np.asarray(value, dtype=float), needs_grad)

    def const(self, value):
        return Node(np.asarray(value, dtype=float), needs_grad=False)

    def _record(self, value, inputs, backward):
        out = Node(value, any(i.needs_grad for i in inputs))
        if out.needs_grad:
            self._ops.append((out, inputs, backward))
        return out

    def backward(self, loss):
        loss.grad = np.ones_like(loss.value)
        for out, inputs, backward in reversed(self._ops):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for node, g in zip(inputs, grads):
                if node.needs_grad and g is not None:
                    node.grad = g if node.grad is None else node.grad + g

    # -- elementwise -------------------------------------------------------

    def add(self, a, b):
        return self._record(a.value + b.value, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b):
        return self._record(a.value - b.value, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a, b):
        return self._record(a.value * b.value, (a, b),
                            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    def div(self, a, b):
        out = a.value / b.value
        return self._record(out, (a, b), lambda g: (_unbroadcast(g / b.value, a.shape),
                                                    _unbroadcast(-g * out / b.value, b.shape)))

    def scale(self, a, k):
        return self._record(a.value * k, (a,), lambda g: (g * k,))

    def add_const(self, a, k):
        return self._record(a.value + k, (a,), lambda g: (g,))

    def square(self, a):
        return self._record(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))

    def tanh(self, a):
        out = np.tanh(a.value)
        return self._record(out, (a,), lambda g: (g * (1.0 - out ** 2),))

    def sigmoid(self, a):
        out = sigmoid(a.value)
        return self._record(out, (a,), lambda g: (g * out * (1.0 - out),))

    def softplus(self, a):
        return self._record(softplus(a.value), (a,), lambda g: (g * sigmoid(a.value),))

    def exp(self, a):
        out = np.exp(a.value)
        return self._record(out, (a,), lambda g: (g * out,))

    def log(self, a):
        return self._record(np.log(a.value), (a,), lambda g: (g / a.value,))

    # -- linear algebra and reductions ---------------------------------------

    def matmul(self, a, b):
        def back(g):
            ga = g @ np.swapaxes(b.value, -1, -2)
            gb = np.swapaxes(a.value, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        return self._record(a.value @ b.value, (a, b), back)

    def sum(self, a, axis=None):
        def back(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
        return self._record(np.sum(a.value, axis=axis), (a,), back)

    def softmax(self, a):
        z = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        return self._record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))

    def log_softmax(self, a):
        z = a.value - a.value.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(out)
        return self._record(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))

    # -- shape ----------------------------------------------------------------

    def concat(self, nodes, axis=-1):
        sizes = [n.shape[axis] for n in nodes]
        cuts = np.cumsum(sizes)[:-1]
        return self._record(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
                            lambda g: tuple(np.split(g, cuts, axis=axis)))

    def stack(self, nodes, axis=1):
        return self._record(np.stack([n.value for n in nodes], axis=axis), tuple(nodes),
                            lambda g: tuple(np.moveaxis(g, axis, 0)))

    def take(self, a, index, axis=1):
        def back(g):
            full = np.zeros(a.shape)
            sl = [slice(None)] * a.value.ndim
            sl[axis] = index
            full[tuple(sl)] = g
            return (full,)
        return self._record(np.take(a.value, index, axis=axis), (a,), back)

    def time_context(self, a, width=3):
        """Zero-padded neighbourhood stack over axis 1: (B, T, D) -> (B, T, width * D)."""
        B, T, D = a.shape
        half = width // 2
        padded = np.pad(a.value, ((0, 0), (half, half), (0, 0)))
        out = np.concatenate([padded[:, j:j + T] for j in range(width)], axis=-1)

        def back(g):
            gp = np.zeros((B, T + 2 * half, D))
            for j in range(width):
                gp[:, j:j + T] += g[..., j * D:(j + 1) * D]
            return (gp[:, half:half + T],)
        return self._record(out, (a,), back)
