"""AdamW, global-norm clipping and the linear warmup/decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
               step: int, lr: float, weight_decay: float = 0.01) -> None:
    """One in-place decoupled-weight-decay Adam update (``step`` counts from 1)."""
    if step < 1:
        raise ValueError("step counts from 1")
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = p.data
        theta -= lr * weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(theta.dtype)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def lr_at_step(step: int, max_steps: int, peak: float, warmup_ratio: float = 0.1,
               warmup_steps: int | None = None) -> float:
    """Linear warmup from 0 to ``peak``, then linear decay to 0 at ``max_steps``."""
    if not 0 <= step <= max_steps:
        raise ValueError("step outside [0, max_steps]")
    warm = warmup_steps if warmup_steps is not None else int(round(warmup_ratio * max_steps))
    if warm > 0 and step < warm:
        return peak * step / warm
    if max_steps == warm:
        return peak
    return peak * (max_steps - step) / (max_steps - warm)
