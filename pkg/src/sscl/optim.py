"""SGD-with-momentum and Adam over flat parameter dicts.

Updates are in-place on float32 arrays and fully deterministic: the update
order is the sorted parameter name order.
"""

from __future__ import annotations

import numpy as np


class SGDMomentum:
    def __init__(self, names: list[str], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.names = sorted(names)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name in self.names:
            if name not in grads or grads[name] is None:
                continue
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(params[name])
                self.velocity[name] = v
            v *= self.momentum
            v += g
            params[name] -= (self.lr * v).astype(params[name].dtype)


class Adam:
    def __init__(self, names: list[str], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.names = sorted(names)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name in self.names:
            if name not in grads or grads[name] is None:
                continue
            g = grads[name].astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            m = self.m.setdefault(name, np.zeros(params[name].shape))
            v = self.v.setdefault(name, np.zeros(params[name].shape))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] -= upd.astype(params[name].dtype)


def make_optimizer(kind: str, names: list[str], lr: float, *,
                   momentum: float = 0.9, weight_decay: float = 0.0,
                   betas=(0.9, 0.999)):
    if kind == "sgd_momentum":
        return SGDMomentum(names, lr, momentum, weight_decay)
    if kind == "adam":
        return Adam(names, lr, betas=betas, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer kind {kind!r}")
