"""Contrastive alignment, inter-modality contrast, multilabel cross-entropy and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INCLUDE_POSITIVE = "include-positive"
NEGATIVES_ONLY = "negatives-only"
DENOMINATOR_MODES = (INCLUDE_POSITIVE, NEGATIVES_ONLY)


def _contrast(sim: Tensor, K: int, mode: str) -> tuple[Tensor, Tensor]:
    """Row- and column-wise InfoNCE terms of a ``(K, K)`` similarity/τ matrix."""
    eye = np.eye(K, dtype=bool)
    positives = (sim * eye.astype(np.float64)).sum(axis=1)
    denom_src = ad.masked_fill(sim, eye, -1e30) if mode == NEGATIVES_ONLY else sim
    row_lse = ad.logsumexp(denom_src, axis=1)
    col_lse = ad.logsumexp(denom_src, axis=0)
    c = -1.0 / (2 * K)
    l_md = ad.scale((positives - row_lse).sum(), c)
    l_dm = ad.scale((positives - col_lse).sum(), c)
    return l_md, l_dm


def alignment_loss(h_m, h_d, tau: float, mode: str = INCLUDE_POSITIVE) -> tuple[Tensor, Tensor, Tensor]:
    """Symmetric contrast of unit rows ``h_m[i]`` against ``h_d[i]``.

    Returns ``(L_MD, L_DM, L_MD + L_DM)``. Each term carries the ``1/(2K)``
    prefactor. In ``negatives-only`` mode the denominator omits the
    positive pair; ``include-positive`` is ordinary InfoNCE.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mode not in DENOMINATOR_MODES:
        raise ValueError(f"denominator mode must be one of {DENOMINATOR_MODES}, got {mode!r}")
    h_m, h_d = ad.as_tensor(h_m), ad.as_tensor(h_d)
    if h_m.shape != h_d.shape or h_m.ndim != 2:
        raise ValueError(f"contrastive inputs must be matching (K, d) matrices, got {h_m.shape} and {h_d.shape}")
    K = h_m.shape[0]
    if mode == NEGATIVES_ONLY and K < 2:
        raise ValueError("negatives-only mode needs K >= 2")
    if K < 1:
        raise ValueError("empty batch")
    sim = ad.scale(ad.matmul(h_m, ad.transpose(h_d)), 1.0 / tau)
    l_md, l_dm = _contrast(sim, K, mode)
    return l_md, l_dm, l_md + l_dm


def intermodal_loss(h_time, h_note, tau: float, mode: str = INCLUDE_POSITIVE) -> Tensor:
    """Baseline contrast pairing the two unimodal representations directly."""
    return alignment_loss(h_time, h_note, tau, mode)[2]


def multilabel_ce(logits, labels) -> Tensor:
    """Mean binary cross-entropy over batch and outcomes, in log-sum form."""
    z = ad.as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"labels {y.shape} do not match logits {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    # relu(z)(1-y) + relu(-z)y equals max(z,0) - zy without cancelling large terms
    margin = ad.relu(z) * (1.0 - y) + ad.relu(-z) * y
    return (margin + ad.softplus(-ad.absolute(z))).mean()


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


@dataclass
class LossReport:
    l_md: float
    l_dm: float
    l_alignment: float
    l_ce: float
    l_total: float
    loss: Tensor

    def as_dict(self) -> dict[str, float]:
        return {"L_MD": self.l_md, "L_DM": self.l_dm, "L_alignment": self.l_alignment,
                "L_ce": self.l_ce, "L_total": self.l_total}


def total_loss(l_md, l_dm, l_ce, weights: LossWeights) -> LossReport:
    """``alpha * (L_MD + L_DM) + beta * L_ce`` with the parts recorded."""
    l_md, l_dm, l_ce = ad.as_tensor(l_md), ad.as_tensor(l_dm), ad.as_tensor(l_ce)
    l_align = l_md + l_dm
    loss = ad.scale(l_align, weights.alpha) + ad.scale(l_ce, weights.beta)
    return LossReport(l_md.item(), l_dm.item(), l_align.item(), l_ce.item(), loss.item(), loss)
