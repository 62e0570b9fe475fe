"""Adam with bias correction and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np


def cosine_anneal(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / T)) / 2, held at lr_min past T."""
    if total <= 0:
        return lr0
    t = min(max(step, 0), total)
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + math.cos(math.pi * t / total))


def adam_step(params: Sequence, grads: Sequence[Optional[np.ndarray]], lr: float, state: dict,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Apply one in-place Adam update; ``state`` starts empty and is filled here."""
    b1, b2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    ms = state.setdefault("m", [np.zeros_like(p.data) for p in params])
    vs = state.setdefault("v", [np.zeros_like(p.data) for p in params])
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, ms, vs):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, lr: Optional[float] = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.lr if lr is None else lr,
                  self.state, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
