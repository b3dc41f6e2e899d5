"""Tiny dense networks with hand-written backprop in float64.

Both the future-state sampler and the driving policy run on these, which keeps
every gradient checkable against central finite differences and makes training
bitwise reproducible under a fixed seed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Params = list[tuple[np.ndarray, np.ndarray]]  # [(W, b), ...]


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> Params:
    """Gaussian fan-in init; hidden activations are tanh, output is linear."""
    params: Params = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out))
        b = np.zeros(n_out)
        params.append((w, b))
    return params


def mlp_forward(params: Params, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass on a (batch, in) array; returns output and a cache."""
    h = np.asarray(x, dtype=np.float64)
    cache = [h]
    for i, (w, b) in enumerate(params):
        z = h @ w + b
        h = np.tanh(z) if i < len(params) - 1 else z
        cache.append(h)
    return h, cache


def mlp_backward(params: Params, cache: list, grad_out: np.ndarray) -> tuple[Params, np.ndarray]:
    """Backprop grad_out through the net; returns (param grads, input grad)."""
    g = np.asarray(grad_out, dtype=np.float64)
    grads: Params = [None] * len(params)  # type: ignore[list-item]
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        h_in, h_out = cache[i], cache[i + 1]
        if i < len(params) - 1:
            g = g * (1.0 - h_out * h_out)  # tanh'
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ w.T
    return grads, g


def clone_params(params: Params) -> Params:
    return [(w.copy(), b.copy()) for w, b in params]


def zeros_like_params(params: Params) -> Params:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]


def add_scaled(dst: Params, src: Params, scale: float) -> None:
    for (dw, db), (sw, sb) in zip(dst, src):
        dw += scale * sw
        db += scale * sb


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in params])


def set_flat_params(params: Params, flat: np.ndarray) -> None:
    i = 0
    for w, b in params:
        w[...] = flat[i : i + w.size].reshape(w.shape)
        i += w.size
        b[...] = flat[i : i + b.size]
        i += b.size
    assert i == flat.size


class Sgd:
    """Plain stochastic gradient descent with a fixed step."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Params, grads: Params) -> None:
        for (w, b), (gw, gb) in zip(params, grads):
            w -= self.lr * gw
            b -= self.lr * gb


class Adam:
    """Standard Adam; state lives with the optimizer instance."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(params, grads, self.m, self.v):
            for p, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [[w.tolist(), b.tolist()] for w, b in self.m],
            "v": [[w.tolist(), b.tolist()] for w, b in self.v],
        }


def finite_difference_grad(f: Callable[[np.ndarray], float], x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, the slow oracle."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
