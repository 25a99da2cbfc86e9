"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mind import tensor as T
from mind.tensor import Tensor


def numerical_grads(fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    out = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat, gflat = leaf.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def analytic_grads(fn: Callable[[], Tensor], leaves: Sequence[Tensor]) -> list[np.ndarray]:
    for leaf in leaves:
        leaf.zero_grad()
    T.backward(fn())
    return [leaf.grad.copy() for leaf in leaves]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - b| / max(|a|, |b|)`` over the whole flattened gradient."""
    diff = float(np.linalg.norm(a - b))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return diff / scale


def gradcheck(fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``leaves``.

    ``fn`` must rebuild the graph from scratch on every call and be a
    deterministic function of the leaf values.
    """
    ana = analytic_grads(fn, leaves)
    num = numerical_grads(fn, leaves, step)
    a = np.concatenate([g.ravel() for g in ana])
    n = np.concatenate([g.ravel() for g in num])
    return relative_error(a, n)
