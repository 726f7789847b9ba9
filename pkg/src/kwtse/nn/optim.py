"""Adam with projection back onto the kernel masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConvModel


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def adam_init(model: ConvModel, lr: float = 1e-3, **kw) -> AdamState:
    params = model.parameters()
    return AdamState(lr=lr, m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params], **kw)


def adam_project_step(model: ConvModel, grads, state: AdamState) -> None:
    """One in-place Adam update, then zero weights and moments off each mask."""
    if not state.m:
        fresh = adam_init(model, state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    flat = [g for pair in grads for g in pair]
    for p, g, m, v in zip(model.parameters(), flat, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    for k, layer in enumerate(model.layers):
        off = layer.off_support()
        if off.any():
            layer.weight[:, :, off] = 0
            state.m[2 * k][:, :, off] = 0
            state.v[2 * k][:, :, off] = 0
