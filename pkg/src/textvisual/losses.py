"""Ranking losses over squared query/image distances.

The positive-aware variant penalizes the positive distance directly and
separately hinges each negative against the margin eta, so the pull toward
the positive never depends on how far the negatives already are. The
classic triplet loss and a positive-distance-only l2 baseline are included
for comparison runs. Image-side embeddings are constants everywhere;
gradients flow only into the query embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError

VARIANT_PATR = "patr"
VARIANT_TRIPLET = "triplet"
VARIANT_L2 = "l2"
_VARIANTS = (VARIANT_PATR, VARIANT_TRIPLET, VARIANT_L2)


@dataclass
class LossConfig:
    variant: str = VARIANT_PATR
    eta: float = 1.2
    rho: float = 0.5
    n_negatives: int = 3

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in _VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}, expected one of {_VARIANTS}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.n_negatives < 1:
            raise ConfigError(f"n_negatives must be >= 1, got {self.n_negatives}")
        if self.variant == VARIANT_TRIPLET and self.n_negatives != 1:
            raise ConfigError("the triplet variant uses exactly one negative per sample")


@dataclass(frozen=True)
class TripletDistances:
    """Squared distances from one query to its positive and mined negatives."""

    s_p: float
    s_n: tuple[float, ...]

    def __post_init__(self):
        vals = (self.s_p, *self.s_n)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ConfigError(f"squared distances must be finite and nonnegative: {vals}")


def patr(d: TripletDistances, eta: float) -> float:
    """Positive distance plus a hinge pushing every negative beyond eta.

    d/ds_p is exactly 1; d/ds_n[i] is -1 while s_n[i] < eta and 0 at or
    beyond the margin (subgradient 0 at the kink).
    """
    if not d.s_n:
        raise ConfigError("positive-aware loss needs at least one negative distance")
    return d.s_p + sum(max(0.0, eta - s) for s in d.s_n)


def triplet(d: TripletDistances, rho: float) -> float:
    """Classic margin loss max(s_p - s_n + rho, 0) over a single negative."""
    if len(d.s_n) != 1:
        raise ConfigError(f"triplet loss takes exactly one negative, got {len(d.s_n)}")
    return max(d.s_p - d.s_n[0] + rho, 0.0)


def l2_baseline(d: TripletDistances) -> float:
    """Positive squared distance alone; negatives are ignored."""
    return d.s_p


def multitask_combine(loss_caption: float, loss_click: float) -> float:
    """Exact arithmetic mean of the two per-source losses."""
    return (loss_caption + loss_click) / 2.0


def _coefficients(s_p: float, s_n: np.ndarray, cfg: LossConfig) -> tuple[float, float, np.ndarray]:
    """Per-sample loss and hinge-state coefficients.

    The query gradient is coef_p * 2(q-p) + sum_j coef_n[j] * 2(q-n_j).
    """
    if cfg.variant == VARIANT_PATR:
        if s_n.size == 0:
            raise ConfigError("positive-aware loss needs at least one negative per sample")
        hinge = np.maximum(0.0, cfg.eta - s_n)
        coef_n = np.where(s_n < cfg.eta, -1.0, 0.0)
        return float(s_p + hinge.sum()), 1.0, coef_n
    if cfg.variant == VARIANT_TRIPLET:
        if s_n.size != 1:
            raise ConfigError(f"triplet loss takes exactly one negative, got {s_n.size}")
        margin = s_p - float(s_n[0]) + cfg.rho
        if margin > 0.0:
            return margin, 1.0, np.array([-1.0])
        return 0.0, 0.0, np.array([0.0])
    # l2 baseline
    return float(s_p), 1.0, np.zeros(s_n.shape)


def batch_loss(
    query_embs: np.ndarray,
    positive_embs: np.ndarray,
    negative_sets: Sequence[np.ndarray],
    cfg: LossConfig,
) -> float:
    """Mean per-sample loss over a batch (query gradients discarded)."""
    loss, _ = batch_loss_with_grad(query_embs, positive_embs, negative_sets, cfg)
    return loss


def batch_loss_with_grad(
    query_embs: np.ndarray,
    positive_embs: np.ndarray,
    negative_sets: Sequence[np.ndarray],
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Mean loss and its exact gradient w.r.t. the query embeddings.

    negative_sets[i] holds the mined negatives for sample i as an
    (n_i, D) array of constant image embeddings.
    """
    b = query_embs.shape[0]
    if b == 0:
        raise ConfigError("batch_loss needs a non-empty batch")
    if positive_embs.shape != query_embs.shape or len(negative_sets) != b:
        raise ConfigError(
            f"batch_loss size mismatch: queries {query_embs.shape}, "
            f"positives {positive_embs.shape}, {len(negative_sets)} negative sets"
        )
    d_query = np.zeros_like(query_embs)
    total = 0.0
    for i in range(b):
        q = query_embs[i]
        diff_p = q - positive_embs[i]
        s_p = float(np.sum(diff_p * diff_p))
        negs = negative_sets[i]
        diff_n = q[None, :] - negs
        s_n = np.sum(diff_n * diff_n, axis=1)
        loss_i, coef_p, coef_n = _coefficients(s_p, s_n, cfg)
        total += loss_i
        grad = (2.0 * coef_p) * diff_p
        if negs.shape[0]:
            grad = grad + 2.0 * (coef_n[:, None] * diff_n).sum(axis=0)
        d_query[i] = grad
    return total / b, d_query / b
