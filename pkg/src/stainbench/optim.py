"""SGD with momentum and the per-epoch cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class TrainConfig:
    lr0: float = 0.01
    epochs: int = 300
    momentum: float = 0.9
    batch_size: int = 4
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """lr0 at epoch 0 down to exactly 0 at epoch == cfg.epochs."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch == cfg.epochs:
        return 0.0
    return 0.5 * cfg.lr0 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def sgd_step(params: dict, grads: dict, lr: float, cfg: TrainConfig, velocity: dict | None = None) -> dict:
    """In-place SGD update; ``velocity`` holds the momentum buffers and is updated too.

    velocity <- m * velocity + grad; param <- param - lr * velocity.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters {missing}")
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        if cfg.momentum:
            v = velocity.get(name)
            v = g.astype(p.dtype, copy=True) if v is None else np.add(cfg.momentum * v, g, dtype=p.dtype)
            velocity[name] = v
            g = v
        p -= (lr * g).astype(p.dtype, copy=False)
    return params
