"""Tiny dense networks with hand-written backpropagation.

Parameters of a network live in one flat float64 vector; layer weights are
views into it. That keeps copying, checkpointing and optimizer state trivial.
"""

from __future__ import annotations

import numpy as np


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def tanh_grad_from_out(y):
    return 1.0 - y * y


ACTIVATIONS = ("silu", "tanh")


class Mlp:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers use ``activation``; the output layer is linear unless
    ``out_activation`` is set.
    """

    def __init__(self, sizes, rng=None, activation="silu", out_activation=False,
                 params=None, out_scale=1.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.out_activation = bool(out_activation)
        n = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        self.params = np.zeros(n) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.params.shape}")
        self._bind()
        if params is None and rng is not None:
            self.init(rng, out_scale)

    def _bind(self):
        self.layers = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.params[off:off + a * b].reshape(a, b)
            off += a * b
            bias = self.params[off:off + b]
            off += b
            self.layers.append((W, bias))

    @property
    def num_params(self) -> int:
        return self.params.size

    def init(self, rng, out_scale=1.0):
        for i, (W, b) in enumerate(self.layers):
            W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
            if i == len(self.layers) - 1:
                W *= out_scale
            b[...] = 0.0

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, activation=self.activation,
                   out_activation=self.out_activation, params=self.params.copy())

    def set_params(self, flat):
        self.params[...] = flat

    def _act(self, z):
        return silu(z) if self.activation == "silu" else np.tanh(z)

    def forward(self, x, keep=False):
        """Apply the network; with ``keep`` also return a cache for :meth:`backward`."""
        h = np.asarray(x, dtype=np.float64)
        cache = [h]
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            z = h @ W + b
            if i < last or self.out_activation:
                h = self._act(z)
                cache.append((z, h))
            else:
                h = z
                cache.append((z, None))
        return (h, cache) if keep else h

    def backward(self, cache, grad_out):
        """Return ``(flat parameter gradient, input gradient)``."""
        grad = np.zeros_like(self.params)
        views = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            gW = grad[off:off + a * b].reshape(a, b)
            off += a * b
            views.append((gW, grad[off:off + b]))
            off += b
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            z, h = cache[i + 1]
            if h is not None:
                g = g * (silu_grad(z) if self.activation == "silu" else tanh_grad_from_out(h))
            inp = cache[i][1] if i > 0 else cache[0]
            gW, gb = views[i]
            gW[...] = inp.T @ g if inp.ndim > 1 else np.outer(inp, g)
            gb[...] = g.sum(axis=0) if g.ndim > 1 else g
            g = g @ self.layers[i][0].T
        return grad, g


class SgdMomentum:
    def __init__(self, lr=1e-3, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self._v = None

    def step(self, params, grad, lr=None):
        if self._v is None:
            self._v = np.zeros_like(params)
        self._v *= self.momentum
        self._v -= (self.lr if lr is None else lr) * grad
        params += self._v


class Adam:
    def __init__(self, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self._m = self._v = None
        self._n = 0

    def step(self, params, grad):
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._n += 1
        self._m = self.b1 * self._m + (1 - self.b1) * grad
        self._v = self.b2 * self._v + (1 - self.b2) * grad * grad
        mhat = self._m / (1 - self.b1 ** self._n)
        vhat = self._v / (1 - self.b2 ** self._n)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_grad_norm(grad, max_norm):
    n = float(np.linalg.norm(grad))
    if max_norm and n > max_norm:
        grad *= max_norm / n
    return n
