"""SGD with classical momentum, weight decay and parameter freezing."""
from __future__ import annotations

import fnmatch
from typing import Iterable

import numpy as np

from .tensor import Parameter


class SGD:
    """``v <- momentum * v + (g + weight_decay * w)``; ``w <- w - lr * v``.

    Parameters whose name matches one of ``frozen`` (fnmatch patterns) are
    never updated.  Shared parameters are updated once per step.
    """

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, frozen: Iterable[str] = ()):
        uniq = {}
        for p in params:
            uniq.setdefault(id(p), p)
        self.params = list(uniq.values())
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.frozen = tuple(frozen)
        self._velocity: dict[int, np.ndarray] = {}

    def is_frozen(self, p: Parameter) -> bool:
        return any(fnmatch.fnmatchcase(p.name or "", pat) for pat in self.frozen)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None or self.is_frozen(p):
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                g = v
            p.data -= (self.lr * g).astype(p.data.dtype, copy=False)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity=None, frozen=()):
    """Functional single step over parallel lists of arrays; returns ``(params, velocity)``."""
    velocity = [None] * len(params) if velocity is None else list(velocity)
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        if i in frozen:
            out.append(w)
            continue
        g = g + weight_decay * w
        v = g if velocity[i] is None else momentum * velocity[i] + g
        velocity[i] = v
        out.append(w - lr * v)
    return out, velocity
