"""Mini-batch training loop over synthetic samples."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, fields

import numpy as np

from .model import N_SPECIAL, ModelConfig, TrainState, new_train_state, train_step
from .numerics import AdamConfig, RandomStreams

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    warmup: int = 400
    lr_constant: float = 1.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.warmup < 1:
            raise ValueError("steps, batch_size and warmup must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def to_model_ids(tokens) -> list[int]:
    return [int(t) + N_SPECIAL for t in tokens]


def from_model_ids(ids) -> list[int]:
    return [int(t) - N_SPECIAL for t in ids if t >= N_SPECIAL]


def batches(n: int, batch_size: int, gen: np.random.Generator):
    """Endless stream of index batches; reshuffles every epoch."""
    while True:
        order = gen.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i:i + batch_size]


def fit_model(model_cfg: ModelConfig, samples, cfg: TrainConfig, callback=None) -> TrainState:
    """Train from scratch. ``callback(step, loss)`` may return True to stop early."""
    if not samples:
        raise ValueError("no training samples")
    state = new_train_state(model_cfg, cfg.seed,
                            AdamConfig(d_model=model_cfg.d_model, warmup=cfg.warmup, constant=cfg.lr_constant))
    order = batches(len(samples), cfg.batch_size, RandomStreams(cfg.seed).get("batches"))
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = next(order)
        loss = train_step(state, [samples[i].frames for i in idx], [to_model_ids(samples[i].tokens) for i in idx])
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.4f (%.1fs)", step, loss, time.perf_counter() - start)
        if callback is not None and callback(step, loss):
            break
    return state


def write_loss_csv(state: TrainState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        w.writerows(state.history)


__all__ = ["TrainConfig", "fit_model", "to_model_ids", "from_model_ids", "batches", "write_loss_csv"]
