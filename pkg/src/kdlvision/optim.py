"""Gradient-descent optimizers over a :class:`~kdlvision.nn.ParameterSet`.

Frozen parameters are skipped outright, so their bytes never change.
"""

import numpy as np

from .errors import MissingGrad


class Optimizer:
    def __init__(self, params, lr):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = params
        self.lr = lr
        self.state = {}

    def _trainable(self):
        for path, p in self.params.items():
            if p.frozen:
                continue
            if p.grad is None:
                raise MissingGrad(f"parameter {path!r} has no gradient")
            yield path, p

    def zero_grad(self):
        self.params.zero_grad()


class SGD(Optimizer):
    """Plain SGD, or heavy-ball momentum when ``momentum > 0``."""

    def __init__(self, params, lr, momentum=0.0):
        super().__init__(params, lr)
        self.momentum = momentum

    def step(self):
        lr = self.lr
        for path, p in self._trainable():
            g = p.grad.astype(p.dtype, copy=False)
            if self.momentum:
                buf = self.state.get(path)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.state[path] = buf
                g = buf
            p.data -= p.dtype.type(lr) * g


class Adam(Optimizer):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for path, p in self._trainable():
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.state.get(path, (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.state[path] = (m, v)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.dtype, copy=False)


def make_optimizer(kind, params, lr, momentum=0.9, beta1=0.9, beta2=0.999, eps=1e-8):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "sgd_momentum":
        return SGD(params, lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {kind!r}")
