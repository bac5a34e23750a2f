"""AdamW with decoupled weight decay, global-norm clipping and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWConfig:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def decays(name: str, shape: tuple) -> bool:
    """Weight decay applies to matrices only (not biases, norm gains or the mask token)."""
    return len(shape) >= 2


def adamw_step(params: dict, grads: dict, state: AdamWState, cfg: AdamWConfig, t: int, lr: float | None = None) -> bool:
    """One in-place update of ``params`` (name -> ndarray).

    Returns False, leaving everything untouched, when any gradient is non-finite.
    """
    if t < 1:
        raise ValueError("adamw step index t must be >= 1")
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            return False
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        if cfg.weight_decay and decays(name, p.shape):
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    state.step = t
    return True


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(math.fsum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def lr_at(step: int, total_steps: int, peak: float, warmup_frac: float = 0.05, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak`` then cosine decay to ``min_lr`` at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step <= warm:
        return peak * step / warm
    progress = min(1.0, (step - warm) / max(1, total_steps - warm))
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + math.cos(math.pi * progress))
