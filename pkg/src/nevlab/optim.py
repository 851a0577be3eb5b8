"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def cosine_lr(step: int, total: int, peak: float) -> float:
    if total < 1:
        raise ValueError("total steps must be at least 1")
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.05,
    max_grad_norm: float = 0.0,
) -> None:
    """One AdamW update of every parameter that carries a gradient.

    Raises ``FloatingPointError("diverged")`` before touching anything if a
    gradient is not finite.
    """
    # parameters the loss never reached (grad None) are skipped entirely
    live = {n: p for n, p in params.items() if p.requires_grad and p.grad is not None}
    grads = {n: p.grad for n, p in live.items()}
    for g in grads.values():
        if not np.isfinite(g).all():
            raise FloatingPointError("diverged")
    if max_grad_norm > 0:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > max_grad_norm:
            scale = max_grad_norm / total
            grads = {n: g * scale for n, g in grads.items()}
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n, p in live.items():
        g = grads[n]
        m = state.m.get(n)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[n], state.v[n] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data
        p.data = p.data - lr * update


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
