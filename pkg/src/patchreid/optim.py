"""Adam with decoupled weight decay, operating on named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamState:
    """First/second moment buffers plus a shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update over every parameter with a populated gradient.

    Weight decay is decoupled: it shrinks parameters directly and never
    enters the moment estimates. Parameters whose grad is None are skipped
    (zero gradient + zero decay leaves them untouched).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            if weight_decay:
                p.data -= lr * weight_decay * p.data
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for '{name}'")
        state.ensure(name, p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
