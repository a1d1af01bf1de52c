"""Adam with decoupled weight decay, and a milestone learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One in-place AdamW update.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * p

    Parameters whose gradient is None are skipped entirely (no decay, no
    moment update), matching the usual "unused this step" semantics.
    Moments are keyed by position in ``params``, so pass them in a stable order.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= update


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                   self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class MultiStepLR:
    """Multiply the learning rate by ``gamma`` at each milestone epoch."""

    def __init__(self, optimizer: AdamW, milestones: Sequence[int], gamma: float):
        if list(milestones) != sorted(milestones):
            raise ValueError(f"milestones must be ascending, got {list(milestones)}")
        self.optimizer = optimizer
        self.base_lr = optimizer.lr
        self.milestones = list(milestones)
        self.gamma = gamma
        self.epoch = 0

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.gamma ** passed

    def step(self) -> None:
        self.epoch += 1
        self.optimizer.lr = self.lr_at(self.epoch)
