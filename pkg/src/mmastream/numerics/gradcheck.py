"""Finite-difference gradient checking against the tape autodiff."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar ``fn`` evaluated entirely in float64."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    with precision(np.float64):
        for k, x in enumerate(base):
            g = np.zeros_like(x)
            flat = x.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = fn(*[Tensor(b) for b in base]).data.item()
                flat[idx] = orig - h
                fm = fn(*[Tensor(b) for b in base]).data.item()
                flat[idx] = orig
                g.reshape(-1)[idx] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(x, requires_grad=True) for x in inputs]
    for t in ts:
        t.zero_grad()
    fn(*ts).backward()
    return [t.grad for t in ts]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Worst relative error over inputs between autodiff (current dtype) and float64 central differences."""
    ana = analytic_grad(fn, inputs)
    num = numeric_grad(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
