"""Central finite-difference gradient checking (64-bit only)."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import InvalidInput
from .tensor import Tensor

# relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR)
REL_FLOOR = 1e-6


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backprop and central differences.

    ``fn`` rebuilds the graph from scratch and must return a scalar.  With
    ``max_coords`` set, that many coordinates per tensor are sampled.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise InvalidInput(f"grad_check needs float64 tensors, {p.name or p} is {p.dtype}")
    for p in params:
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise InvalidInput(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(fn().data)
            flat[i] = orig - epsilon
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), REL_FLOOR)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
