"""Confidence-weighted reconstruction loss over masked patches.

For every masked patch with squared residual r2 (summed over the patch vector)
and confidence c the loss term is ``(c + epsilon) * r2 - lambda * log(c)``; the
total is the mean of those terms. Unmasked patches are not gathered at all, so
they receive no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyDenominatorError
from .masking import MaskPlan


@dataclass
class LossConfig:
    epsilon: float = 0.1
    lam: float = 0.1

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0")


@dataclass
class LossBreakdown:
    total: T.DiffTensor
    weighted_mse: T.DiffTensor
    confidence_penalty: T.DiffTensor
    per_view_mse: list
    mean_confidence: float

    def to_json(self) -> dict:
        return {
            "loss": self.total.item(),
            "weighted_mse": self.weighted_mse.item(),
            "confidence_penalty": self.confidence_penalty.item(),
            "per_view_mse": [None if math.isnan(x) else x for x in self.per_view_mse],
            "mean_confidence": self.mean_confidence,
        }


def confidence_l2(pred, target, conf, plan: MaskPlan | np.ndarray, cfg: LossConfig | None = None) -> LossBreakdown:
    cfg = cfg or LossConfig()
    cfg.validate()
    pred, conf = T.as_tensor(pred), T.as_tensor(conf)
    target = np.asarray(T.as_tensor(target).data)
    masked = plan.masked if isinstance(plan, MaskPlan) else np.asarray(plan, dtype=bool)
    n_masked = int(masked.sum())
    if n_masked == 0:
        raise EmptyDenominatorError("confidence_l2: no masked patches, loss is undefined")
    diff = T.getitem(pred, masked) - target[masked]  # (M, patch_dim)
    r2 = T.tsum(T.square(diff), axis=-1)  # (M,)
    c = T.getitem(conf, masked)
    inv = 1.0 / n_masked
    weighted = T.tsum((c + cfg.epsilon) * r2) * inv
    penalty = (T.tsum(-T.log(c)) * inv) * cfg.lam
    total = weighted + penalty

    r2_all = np.zeros(masked.shape)
    r2_all[masked] = r2.data
    per_view = []
    for v in range(masked.shape[0]):
        cnt = masked[v].sum()
        per_view.append(float(r2_all[v].sum() / cnt) if cnt else float("nan"))
    return LossBreakdown(total, weighted, penalty, per_view, float(c.data.mean()))


def optimal_confidence(residual_sq: float, cfg: LossConfig | None = None) -> float:
    """Per-patch minimizer over c of (c + eps) r2 - lambda log c, clamped into (0, 1)."""
    cfg = cfg or LossConfig()
    if residual_sq < 0:
        raise ValueError("residual_sq must be >= 0")
    hi, lo = 1.0 - 1e-6, 1e-6
    if residual_sq == 0:
        return hi
    return float(min(max(cfg.lam / residual_sq, lo), hi))
