"""Segmentation training losses on predicted probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, clip, log

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.9
    eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass
class PredictionPair:
    """Predicted probabilities ``p`` and binary ground truth ``g`` of equal shape."""

    p: Tensor
    g: np.ndarray

    def __post_init__(self):
        self.p = as_tensor(self.p)
        g = self.g.data if isinstance(self.g, Tensor) else np.asarray(self.g)
        if self.p.shape != g.shape:
            raise ValueError(f"prediction {self.p.shape} and label {g.shape} shapes differ")
        if not np.isin(g, (0, 1)).all():
            raise ValueError("ground truth must be binary")
        if self.p.data.min() < 0 or self.p.data.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        self.g = g.astype(self.p.dtype, copy=False)

    @property
    def n(self) -> int:
        return self.g.size


def dice_loss(pair: PredictionPair, eps: float = 1e-6) -> Tensor:
    """``1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)``."""
    p, g = pair.p, pair.g
    inter = (p * g).sum()
    denom = (p * p).sum() + float((g * g).sum())
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bce_loss(pair: PredictionPair, clamp: float = BCE_CLAMP) -> Tensor:
    """Mean binary cross-entropy with ``p`` clamped to ``[clamp, 1 - clamp]``."""
    g = pair.g
    pc = clip(pair.p, clamp, 1.0 - clamp)
    ll = g * log(pc) + (1.0 - g) * log(1.0 - pc)
    return -ll.mean()


def combined_loss(pair: PredictionPair, cfg: LossConfig = LossConfig()) -> Tensor:
    """``gamma * dice + (1 - gamma) * bce``."""
    if cfg.gamma == 1.0:
        return dice_loss(pair, cfg.eps)
    if cfg.gamma == 0.0:
        return bce_loss(pair)
    return cfg.gamma * dice_loss(pair, cfg.eps) + (1.0 - cfg.gamma) * bce_loss(pair)
