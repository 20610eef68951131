"""Cross-attention between the time-series and note sequences, then a fused vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import MASK_VALUE, EncodedModality, masked_mean
from .nn import Linear, Module, glorot


class CrossAttention(Module):
    """Single-head attention of a target sequence over a source sequence."""

    def __init__(self, d: int, d_k: int, rng: np.random.Generator):
        if d_k <= 0:
            raise ValueError("d_k must be positive")
        self.d_k = d_k
        self.w_q = glorot(rng, d, d_k)
        self.w_k = glorot(rng, d, d_k)
        self.w_v = glorot(rng, d, d)
        self.last_weights: np.ndarray | None = None

    def __call__(self, target: Tensor, source: Tensor, source_mask: np.ndarray | None = None) -> Tensor:
        target, source = ad.as_tensor(target), ad.as_tensor(source)
        if source.shape[-2] == 0:
            raise ValueError("cross-attention source is empty")
        if target.shape[-1] != source.shape[-1]:
            raise ValueError(f"target {target.shape} and source {source.shape} widths differ")
        q = ad.matmul(target, self.w_q)
        k = ad.matmul(source, self.w_k)
        v = ad.matmul(source, self.w_v)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.d_k))
        if source_mask is not None:
            sm = np.asarray(source_mask, dtype=bool)
            if not sm.any(axis=-1).all():
                raise ValueError("cross-attention source has no valid positions")
            scores = ad.masked_fill(scores, ~sm[..., None, :], MASK_VALUE)
        weights = ad.softmax(scores, axis=-1)
        self.last_weights = weights.data
        return ad.matmul(weights, v)


def cross_attend(target, source, params: CrossAttention, source_mask=None) -> Tensor:
    return params(target, source, source_mask)


@dataclass
class FusedRepresentation:
    h: Tensor  # (B, d_f)
    enriched_time: Tensor  # (B, L_t, d)
    enriched_note: Tensor  # (B, L_n, d)
    projection_m: Tensor  # (B, d_c), unit rows


class Fusion(Module):
    """Enrich each modality by attending over the other, mean-pool both,
    concatenate, project to ``d_f``; a contrast head maps to unit ``d_c`` vectors.
    """

    def __init__(self, d: int, d_f: int, d_c: int, rng: np.random.Generator, d_k: int | None = None):
        d_k = d_k or d
        self.note_to_time = CrossAttention(d, d_k, rng)
        self.time_to_note = CrossAttention(d, d_k, rng)
        self.out = Linear(2 * d, d_f, rng)
        self.contrast = Linear(d_f, d_c, rng)

    def __call__(self, x_time: EncodedModality, x_note: EncodedModality) -> FusedRepresentation:
        enriched_time = self.note_to_time(x_time.sequence, x_note.sequence, x_note.mask)
        enriched_note = self.time_to_note(x_note.sequence, x_time.sequence, x_time.mask)
        pooled = ad.concat([masked_mean(enriched_time, x_time.mask), masked_mean(enriched_note, x_note.mask)], axis=-1)
        h = self.out(pooled)
        return FusedRepresentation(h, enriched_time, enriched_note, ad.l2_normalize(self.contrast(h)))


def fuse(x_time: EncodedModality, x_note: EncodedModality, params: Fusion) -> FusedRepresentation:
    return params(x_time, x_note)
