"""Least-squares adversarial losses and label-smoothed cross-entropy.

Discriminator scores are probabilities in (0, 1). Extracted features are the
negative samples (target 0 for the discriminator) and generated features are
the positive samples (target 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .networks import one_hot
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 0.85  # on the feature extractor's adversarial loss
    lambda1: float = 0.15  # on the classification loss

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("loss weights must be non-negative")


def _nonempty(scores: Tensor, what: str) -> None:
    if scores.data.size == 0:
        raise ValueError(f"{what}: empty batch")


def loss_adv_d(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-(mean((1 - D(h))^2) + mean(D(h')^2)); minimised by the discriminator."""
    _nonempty(d_real, "loss_adv_d")
    _nonempty(d_fake, "loss_adv_d")
    return -(T.mean(T.square(1.0 - d_real)) + T.mean(T.square(d_fake)))


def loss_adv_f(d_real: Tensor) -> Tensor:
    _nonempty(d_real, "loss_adv_f")
    return T.mean(T.square(1.0 - d_real))


def loss_adv_g(d_fake: Tensor) -> Tensor:
    _nonempty(d_fake, "loss_adv_g")
    return T.mean(T.square(1.0 - d_fake))


def loss_err(probs: Tensor, y: np.ndarray, epsilon: float = 0.1) -> Tensor:
    """Cross-entropy against targets ``(1 - eps) * one_hot(y) + eps / C``.

    Probabilities are clamped at 1e-12 before the log, so a confidently wrong
    prediction costs about 27.6 nats instead of infinity.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("label smoothing epsilon must be in [0, 1)")
    n, c = probs.shape
    if n == 0:
        raise ValueError("loss_err: empty batch")
    target = (1.0 - epsilon) * one_hot(y, c) + epsilon / c
    logp = T.log(T.clip_min(probs, PROB_FLOOR))
    return T.sum(T.mul(logp, Tensor(target))) * (-1.0 / n)


def total_loss(adv_d, adv_g, adv_f, err, weights: LossWeights = LossWeights()):
    """Reporting value of the combined objective; training follows the per-component schedule instead."""
    return adv_d + adv_g + weights.lambda0 * adv_f + weights.lambda1 * err
