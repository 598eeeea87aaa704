from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction.  Missing gradients count as zero."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


def adam_step(params: Sequence[Tensor], grads: Sequence, state: AdamState) -> None:
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[k], state.v[k]
        if m.shape != p.data.shape:
            raise ValueError(f"Adam state shape {m.shape} does not match parameter {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)
