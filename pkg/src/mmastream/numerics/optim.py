"""Adam with the Noam warmup/decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def noam_lr(step: int, d_model: int, warmup: int, constant: float = 1.0) -> float:
    """constant * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return constant * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamConfig:
    d_model: int = 64
    warmup: int = 400
    constant: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


class AdamNoam:
    """Adam whose step size follows :func:`noam_lr`.

    Moments are kept per parameter; ``step()`` raises :class:`NonFiniteError`
    and leaves parameters untouched if any gradient is NaN/Inf.
    """

    def __init__(self, params: Sequence[Tensor], cfg: AdamConfig | None = None, lr_scale: float = 1.0):
        self.params = list(params)
        self.cfg = cfg or AdamConfig()
        self.lr_scale = lr_scale
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def lr(self, step: int | None = None) -> float:
        c = self.cfg
        return self.lr_scale * noam_lr(step or self.t or 1, c.d_model, c.warmup, c.constant)

    def step(self) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name or '?'}")
        self.t += 1
        c = self.cfg
        lr = self.lr(self.t)
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)).astype(p.data.dtype)
        return lr

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def adam_noam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], step: int,
                   cfg: AdamConfig, state: dict | None = None) -> dict:
    """Functional form: apply one update at ``step`` using (and returning) moment ``state``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    opt = AdamNoam(params, cfg)
    if state:
        opt.m, opt.v = state["m"], state["v"]
    opt.t = step - 1
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    return opt.state_dict()
