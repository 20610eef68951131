"""The full multimodal network and record batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import CohortRecord
from .encoders import AttentionConfig, EncodedModality, NoteProjector, TimeSeriesEncoder, masked_mean
from .fusion import FusedRepresentation, Fusion
from .nn import Linear, Module, glorot, param
from .tokenizer import TokenBatch, TokenEmbedding, tokenize


@dataclass
class ModelConfig:
    n_variables: int
    static_dim: int
    embed_dim: int
    n_outcomes: int
    d: int = 32
    d_t: int = 8
    d_f: int = 32
    d_c: int = 32
    window: int = 8
    rel_clip: int = 8
    n_heads: int = 1
    n_layers: int = 1
    dropout: float = 0.2
    max_len: int = 512
    p_max: int = 512
    encoder_mode: str = "linear"

    @property
    def n_global(self) -> int:
        return self.n_outcomes

    def attention(self) -> AttentionConfig:
        return AttentionConfig(d_model=self.d, window=self.window, n_heads=self.n_heads, n_layers=self.n_layers,
                               n_global=self.n_global, dropout=self.dropout, rel_clip=self.rel_clip)


@dataclass
class Batch:
    patient_ids: list[str]
    tokens: TokenBatch
    static: np.ndarray
    notes: np.ndarray
    note_mask: np.ndarray
    discharge: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.patient_ids)


def make_batch(records: list[CohortRecord], n_global: int, max_len: int = 512, p_max: int | None = None) -> Batch:
    if not records:
        raise ValueError("empty batch")
    tokens = TokenBatch.stack([tokenize(r, n_global, max_len, p_max) for r in records])
    M = max(len(r.note_chunks) for r in records)
    e = records[0].embed_dim
    notes = np.zeros((len(records), M, e))
    note_mask = np.zeros((len(records), M), dtype=bool)
    for b, r in enumerate(records):
        m = len(r.note_chunks)
        notes[b, :m] = r.note_chunks
        note_mask[b, :m] = True
    return Batch(
        patient_ids=[r.patient_id for r in records],
        tokens=tokens,
        static=np.vstack([r.static for r in records]),
        notes=notes,
        note_mask=note_mask,
        discharge=np.vstack([r.discharge for r in records]),
        labels=np.vstack([r.labels for r in records]),
    )


@dataclass
class ModelOutput:
    logits: Tensor  # (B, n_outcomes)
    features: Tensor  # (B, n_outcomes, d + d_f): head inputs
    fused: FusedRepresentation
    time: EncodedModality
    note: EncodedModality
    h_d: Tensor  # (B, d_c) unit rows, projected discharge
    h_time: Tensor  # (B, d_c) unit rows, unimodal time summary
    h_note: Tensor  # (B, d_c) unit rows, unimodal note summary


class EHRContrastModel(Module):
    """Token embedding → windowed encoder ‖ note projector → cross-modal fusion.

    Each outcome's logit is a linear read-out of that outcome's global
    token state concatenated with the fused vector ``h``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d
        self.embed = TokenEmbedding(cfg.n_variables, cfg.static_dim, d, cfg.n_global, rng, d_t=cfg.d_t,
                                    p_max=cfg.p_max, encoder_mode=cfg.encoder_mode)
        self.encoder = TimeSeriesEncoder(cfg.attention(), rng)
        self.time_proj = Linear(d, d, rng)
        self.notes = NoteProjector(cfg.embed_dim, d, rng)
        self.fusion = Fusion(d, cfg.d_f, cfg.d_c, rng)
        self.discharge_head = Linear(cfg.embed_dim, cfg.d_c, rng)
        self.time_contrast = Linear(d, cfg.d_c, rng)
        self.note_contrast = Linear(d, cfg.d_c, rng)
        self.head_weight = glorot(rng, d + cfg.d_f, 1, shape=(cfg.n_outcomes, d + cfg.d_f))
        self.head_bias = param(np.zeros(cfg.n_outcomes))

    def __call__(self, batch: Batch, rng: np.random.Generator | None = None) -> ModelOutput:
        cfg = self.cfg
        tok = batch.tokens
        emb = self.embed(tok, batch.static)
        emb = ad.dropout(emb, cfg.dropout, rng, self.training)
        enc = self.encoder(emb, tok.mask, tok.abs_pos, tok.n_global, rng)
        x_time = EncodedModality(self.time_proj(enc.sequence), enc.mask, enc.global_outputs)
        x_note = self.notes(batch.notes, batch.note_mask)
        fused = self.fusion(x_time, x_note)

        B = len(batch)
        g = cfg.n_global
        h_rep = ad.mul(fused.h.reshape(B, 1, cfg.d_f), np.ones((1, g, 1)))
        features = ad.concat([enc.global_outputs, h_rep], axis=-1)
        logits = (features * self.head_weight).sum(axis=-1) + self.head_bias

        h_d = ad.l2_normalize(self.discharge_head(batch.discharge))
        h_time = ad.l2_normalize(self.time_contrast(masked_mean(x_time.sequence, x_time.mask)))
        h_note = ad.l2_normalize(self.note_contrast(x_note.pooled))
        return ModelOutput(logits, features, fused, x_time, x_note, h_d, h_time, h_note)
