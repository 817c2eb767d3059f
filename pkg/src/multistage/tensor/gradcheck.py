"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, grad


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    out = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    ``fn`` must rebuild the scalar loss from the current values of ``inputs``.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 inputs")
    analytic = grad(fn(), list(inputs))
    worst = 0.0
    for x, a in zip(inputs, analytic):
        worst = max(worst, max_relative_error(a, numeric_grad(fn, x, h)))
    return worst
