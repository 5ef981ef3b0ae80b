"""SGD-momentum and Adam update rules plus the step/warm-up learning-rate schedule."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .diffcore import ShapeError, Tensor


@dataclass
class OptimState:
    rule: str = "sgd"
    lr: float = 1e-2
    wd: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.rule!r}")


def _check(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {grads[k].shape}, parameter {p.shape}")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """buf <- mo * buf + (g + wd * theta);  theta <- theta - lr * buf."""
    _check(params, grads)
    state.step += 1
    for k, p in params.items():
        g = grads[k] + state.wd * p.data if state.wd else grads[k]
        if state.momentum:
            buf = state.buffers.get(k)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.buffers[k] = buf
            g = buf
        p.data = p.data - state.lr * g


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """Bias-corrected Adam with weight decay folded into the gradient."""
    _check(params, grads)
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k] + state.wd * p.data if state.wd else grads[k]
        m = state.buffers.get(k, np.zeros_like(g))
        v = state.second.get(k, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.buffers[k], state.second[k] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def step(params, grads, state: OptimState) -> None:
    (adam_step if state.rule == "adam" else sgd_step)(params, grads, state)


@dataclass
class LrSchedule:
    base: float
    decay: float = 1.0
    decay_epochs: list[int] = field(default_factory=list)
    warmup_epochs: float = 0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay epochs must be strictly increasing")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Linear warm-up from 0 over ``warmup_epochs``, then ``base * decay**(#decay epochs passed)``.

    ``epoch`` may be fractional so warm-up can advance per step.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < schedule.warmup_epochs:
        return schedule.base * epoch / schedule.warmup_epochs
    passed = bisect.bisect_right(schedule.decay_epochs, epoch)
    return schedule.base * schedule.decay ** passed
