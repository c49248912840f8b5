"""First-order optimisers over a network's flat parameter vector."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

OPTIMIZERS = ("sgd", "adam")


class SGD:
    def __init__(self, lr):
        self.lr = float(lr)

    def step(self, net, tensors):
        net.flat -= self.lr * net.flatten_grads(tensors)


class Adam:
    """Adam with bias correction; moments live alongside the network they update."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = float(lr), beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, net, tensors):
        g = net.flatten_grads(tensors)
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        net.flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {name!r}; choose from {OPTIMIZERS}")
