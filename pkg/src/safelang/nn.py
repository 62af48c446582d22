"""Minimal numpy MLPs with hand-written backprop, plus Adam."""

from __future__ import annotations

import numpy as np


class MLP:
    """tanh hidden layers, linear output. Parameters are ``[W0, b0, W1, b1, ...]``."""

    def __init__(self, sizes, rng: np.random.Generator, out_scale: float = 0.01):
        self.sizes = list(sizes)
        self.params = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            # orthogonal-ish scaled init; small last layer keeps early logits near uniform
            scale = out_scale if last else np.sqrt(2.0)
            w = rng.standard_normal((n_in, n_out))
            q, _ = np.linalg.qr(w if n_in >= n_out else w.T)
            w = (q if n_in >= n_out else q.T) * scale
            self.params += [w, np.zeros(n_out)]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ w + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                h = np.tanh(h)
        return h

    def backward(self, dout: np.ndarray, acts) -> list[np.ndarray]:
        grads = [None] * len(self.params)
        d = dout
        for i in reversed(range(self.n_layers)):
            a_in = acts[i]
            grads[2 * i] = a_in.T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            if i > 0:
                d = (d @ self.params[2 * i].T) * (1.0 - acts[i] ** 2)
        return grads


class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        """Descent step on ``grads`` (gradient of the quantity being minimized)."""
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
