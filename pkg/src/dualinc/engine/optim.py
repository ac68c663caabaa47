"""SGD with momentum and weight decay, plus learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    parameters: list[Tensor]
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    momentum_buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if not self.momentum_buffers:
            self.momentum_buffers = [np.zeros_like(p.data) for p in self.parameters]
        if [b.shape for b in self.momentum_buffers] != [p.shape for p in self.parameters]:
            raise ValueError("momentum buffers do not match parameters")

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.grad = None


def sgd_step(group: ParamGroup) -> None:
    """buffer <- momentum*buffer + grad + decay*param; param <- param - lr*buffer."""
    for i, p in enumerate(group.parameters):
        if p.grad is None:
            raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
    dt = group.parameters[0].dtype.type if group.parameters else np.float32
    lr, mom, wd = dt(group.learning_rate), dt(group.momentum), dt(group.weight_decay)
    for p, buf in zip(group.parameters, group.momentum_buffers):
        buf *= mom
        buf += p.grad
        if wd:
            buf += wd * p.data
        p.data -= lr * buf


def lr_schedule(
    kind: str,
    epoch: int,
    base_lr: float,
    horizon: int,
    milestones: Sequence[int] = (),
    decay: float = 0.1,
) -> float:
    """Learning rate for ``epoch`` under a step or half-cosine schedule."""
    if not 0 <= epoch <= horizon:
        raise ValueError(f"epoch {epoch} outside the horizon [0, {horizon}]")
    if kind == "step":
        passed = sum(1 for m in milestones if epoch >= m)
        return base_lr * decay**passed
    if kind == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / horizon))
    raise ValueError(f"unknown schedule kind {kind!r}")
