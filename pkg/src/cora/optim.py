"""Adam / AdamW with bias correction over named parameter lists."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    """Raised when a training loop cannot proceed (divergence, empty data)."""


class AdamState:
    """Per-parameter moment accumulators plus the shared step counter."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decoupled: bool = True):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled


class AdamW:
    """Decoupled-decay Adam. With ``decoupled=False`` decay folds into the
    gradient (plain Adam + L2).

    Decay is applied to the parameters before the moment update and is not
    scaled by the learning rate, so lr=0 leaves only the decay shrinkage and
    lr=0, decay=0 is the identity.
    """

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decoupled: bool = True):
        self.params = list(params)
        self.state = AdamState(self.params, lr, betas, eps, weight_decay, decoupled)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, self.state)


def adamw_step(params: list[Tensor], state: AdamState) -> None:
    """One update over all parameters; missing gradients count as zero."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay != 0.0:
            if state.decoupled:
                p.data *= 1.0 - state.weight_decay
            else:
                g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
