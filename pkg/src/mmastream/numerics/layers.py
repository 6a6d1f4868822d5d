"""Parameter containers: a tiny module system over :class:`Tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .rng import xavier_uniform
from .tensor import Tensor, embedding, layer_norm, matmul


class Layer:
    """Base container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Layer):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            if tuple(state[k].shape) != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Layer):
    def __init__(self, gen: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(xavier_uniform(gen, d_in, d_out))
        self.bias = param(np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Layer):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = param(np.ones(d, dtype=np.float32))
        self.bias = param(np.zeros(d, dtype=np.float32))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)


class Embedding(Layer):
    def __init__(self, gen: np.random.Generator, n: int, d: int):
        self.table = param(xavier_uniform(gen, n, d))

    def __call__(self, ids) -> Tensor:
        return embedding(self.table, ids)
