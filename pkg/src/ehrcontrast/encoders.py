"""Value encoders, sliding-window attention with global tokens, and the note projector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module, param

MASK_VALUE = -1e30


class VariableEncoderBank(Module):
    """Affine scalar-to-vector maps, one per variable (``linear``) or one shared (``shared-linear``)."""

    def __init__(self, n_variables: int, d: int, rng: np.random.Generator, mode: str = "linear"):
        if mode not in ("linear", "shared-linear"):
            raise ValueError(f"unknown encoder mode {mode!r}")
        self.mode = mode
        self.n_variables = n_variables
        rows = n_variables if mode == "linear" else 1
        self.weight = param(rng.normal(scale=1.0 / np.sqrt(d), size=(rows, d)))
        self.bias = param(rng.normal(scale=0.1 / np.sqrt(d), size=(rows, d)))

    @property
    def n_encoders(self) -> int:
        return self.weight.shape[0]

    def __call__(self, values, variable_ids) -> Tensor:
        vid = np.asarray(variable_ids, dtype=np.int64)
        if vid.size and (vid.min() < 0 or vid.max() >= self.n_variables):
            raise ValueError(f"variable id outside [0, {self.n_variables})")
        v = ad.as_tensor(values)
        v = v.reshape(v.shape + (1,))
        if self.mode == "shared-linear":
            return v * self.weight[0] + self.bias[0]
        return v * ad.embedding(self.weight, vid) + ad.embedding(self.bias, vid)


def encode_value(value: float, variable_id: int, bank: VariableEncoderBank) -> Tensor:
    return bank(np.array([value]), np.array([variable_id])).reshape(-1)


@dataclass
class AttentionConfig:
    d_model: int = 32
    window: int = 8
    n_heads: int = 1
    n_layers: int = 1
    n_global: int = 3
    dropout: float = 0.0
    rel_clip: int = 8
    ff_mult: int = 4

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.rel_clip < 1:
            raise ValueError("rel_clip must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class EncodedModality:
    sequence: Tensor  # (B, L, d)
    mask: np.ndarray  # (B, L) bool
    global_outputs: Tensor | None = None  # (B, n_global, d)
    pooled: Tensor | None = None  # (B, d)


def window_buckets(abs_pos: np.ndarray, w: int, k: int) -> np.ndarray:
    """Relative-position bucket for every (token, window slot) pair of real tokens.

    ``abs_pos`` is ``(B, N)``; result ``(B, N, 2w+1)``. Slots that fall off
    the sequence get the centre bucket; they are masked anyway.
    """
    B, N = abs_pos.shape
    offs = np.arange(-w, w + 1)
    j = np.arange(N)[:, None] + offs[None, :]
    inside = (j >= 0) & (j < N)
    jc = np.clip(j, 0, max(N - 1, 0))
    diff = abs_pos[:, jc] - abs_pos[:, :, None] if N else np.zeros((B, 0, 2 * w + 1), dtype=np.int64)
    return np.where(inside[None], np.clip(diff, -k, k) + k, k).astype(np.int64)


def window_visibility(mask: np.ndarray, w: int) -> np.ndarray:
    """``(B, N) -> (B, N, 2w+1)``: slot is inside the sequence and not padding."""
    B, N = mask.shape
    j = np.arange(N)[:, None] + np.arange(-w, w + 1)[None, :]
    inside = (j >= 0) & (j < N)
    jc = np.clip(j, 0, max(N - 1, 0))
    return inside[None] & mask[:, jc] if N else np.zeros((B, 0, 2 * w + 1), dtype=bool)


class SlidingWindowAttention(Module):
    """Multi-head attention where event tokens see a ``±w`` neighbourhood of
    event tokens plus every global token, and global tokens see everything.

    The window runs over sorted token positions, not over absolute
    position values. Scores between event tokens carry a relative-position
    term ``q_i · a[bucket(i, j)]``.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.rel_table = param(rng.normal(scale=1.0 / np.sqrt(cfg.d_head), size=(2 * cfg.rel_clip + 1, cfg.d_head)))
        self.last_score_entries = 0
        self.last_weights: tuple[np.ndarray, np.ndarray] | None = None

    @staticmethod
    def score_buffer_size(L: int, n_global: int, w: int, n_heads: int) -> int:
        """Score entries allocated for one sequence of length ``L``."""
        n = L - n_global
        return n_heads * (n * (2 * w + 1 + n_global) + n_global * L)

    def __call__(self, x: Tensor, mask: np.ndarray, abs_pos: np.ndarray, n_global: int,
                 rng: np.random.Generator | None = None, keep_weights: bool = False) -> Tensor:
        cfg = self.cfg
        B, L, d = x.shape
        if d != cfg.d_model:
            raise ValueError(f"attention expects width {cfg.d_model}, got input shape {x.shape}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, L):
            raise ValueError(f"mask shape {mask.shape} != {(B, L)}")
        g, w, h, dk = n_global, cfg.window, cfg.n_heads, cfg.d_head
        N = L - g
        if g and not mask[:, :g].all():
            raise ValueError("global tokens cannot be masked")
        if not mask.any(axis=1).all():
            raise ValueError("a sequence with every token masked has nothing to attend to")
        scale = 1.0 / np.sqrt(dk)
        # (B, L, heads, d_head) throughout; no head transposes
        q = self.q(x).reshape(B, L, h, dk)
        k = self.k(x).reshape(B, L, h, dk)
        v = self.v(x).reshape(B, L, h, dk)
        drop = cfg.dropout if self.training else 0.0
        outs = []
        entries = 0
        global_weights = local_weights = None

        if g:
            sg = ad.scale(ad.einsum("bghd,blhd->bghl", q[:, :g], k), scale)
            sg = ad.masked_fill(sg, ~mask[:, None, None, :], MASK_VALUE)
            ag = ad.softmax(sg, axis=-1)
            global_weights = ag.data
            ag = ad.dropout(ag, drop, rng, self.training)
            outs.append(ad.einsum("bghl,blhd->bghd", ag, v))
            entries += h * g * L

        if N:
            qr, kr, vr = q[:, g:], k[:, g:], v[:, g:]
            width = 2 * w + 1
            kwin = ad.unfold_windows(kr, w, axis=1)  # (B, N, 2w+1, h, dk)
            vwin = ad.unfold_windows(vr, w, axis=1)
            local = ad.einsum("bnhd,bnwhd->bnhw", qr, kwin)
            rel = ad.matmul(qr, ad.transpose(self.rel_table, (1, 0)))
            buckets = window_buckets(abs_pos[:, g:], w, cfg.rel_clip)
            local = ad.scale(local + ad.take_last(rel, buckets[:, :, None, :]), scale)
            vis = window_visibility(mask[:, g:], w)
            if g:
                glob_cols = ad.scale(ad.einsum("bnhd,bghd->bnhg", qr, k[:, :g]), scale)
                scores = ad.concat([local, glob_cols], axis=-1)
                vis = np.concatenate([vis, np.ones((B, N, g), dtype=bool)], axis=-1)
            else:
                scores = local
            qmask = mask[:, g:]
            empty = ~vis.any(axis=-1)
            if np.any(empty & qmask):
                b, i = np.argwhere(empty & qmask)[0]
                raise ValueError(f"token {g + i} of batch row {b} has no visible keys")
            # padded queries attend to their own slot so the row stays well defined
            vis[..., w] |= ~qmask
            scores = ad.masked_fill(scores, ~vis[:, :, None, :], MASK_VALUE)
            attn = ad.softmax(scores, axis=-1)
            local_weights = attn.data
            attn = ad.dropout(attn, drop, rng, self.training)
            out_r = ad.einsum("bnhw,bnwhd->bnhd", attn[..., :width], vwin)
            if g:
                out_r = out_r + ad.einsum("bnhg,bghd->bnhd", attn[..., width:], v[:, :g])
            outs.append(out_r)
            entries += h * N * (width + g)

        self.last_score_entries = entries
        if keep_weights:
            self.last_weights = (global_weights, local_weights)
        merged = ad.concat(outs, axis=1) if len(outs) > 1 else outs[0]
        return self.o(merged.reshape(B, L, d))


def sliding_window_attention(X, mask, abs_pos, n_global: int, attn: SlidingWindowAttention) -> Tensor:
    """Single-sequence convenience wrapper: ``X`` is ``(L, d)``."""
    X = ad.as_tensor(X)
    out = attn(X.reshape((1,) + X.shape), np.asarray(mask, bool)[None], np.asarray(abs_pos)[None], n_global)
    return out.reshape(X.shape)


def dense_weights(global_weights: np.ndarray | None, local_weights: np.ndarray | None, L: int,
                  n_global: int, w: int) -> np.ndarray:
    """Scatter stored attention weights into a dense ``(B, heads, L, L)`` array."""
    g = n_global
    N = L - g
    ref = global_weights if global_weights is not None else local_weights
    B = ref.shape[0]
    h = ref.shape[2]
    full = np.zeros((B, h, L, L))
    if g:
        full[:, :, :g, :] = global_weights.transpose(0, 2, 1, 3)
    if N:
        lw = local_weights.transpose(0, 2, 1, 3)  # (B, h, N, 2w+1+g)
        for slot, off in enumerate(range(-w, w + 1)):
            for n in range(N):
                j = n + off
                if 0 <= j < N:
                    full[:, :, g + n, g + j] = lw[:, :, n, slot]
        if g:
            full[:, :, g:, :g] = lw[..., 2 * w + 1:]
    return full


class EncoderLayer(Module):
    """Pre-norm attention and feed-forward sublayers with residuals."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.norm1 = LayerNorm(d)
        self.attn = SlidingWindowAttention(cfg, rng)
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(d, cfg.ff_mult * d, rng)
        self.ff2 = Linear(cfg.ff_mult * d, d, rng)

    def __call__(self, x: Tensor, mask, abs_pos, n_global: int, rng=None) -> Tensor:
        p = self.cfg.dropout
        a = self.attn(self.norm1(x), mask, abs_pos, n_global, rng)
        x = x + ad.dropout(a, p, rng, self.training)
        f = self.ff2(ad.relu(self.ff1(self.norm2(x))))
        return x + ad.dropout(f, p, rng, self.training)


class TimeSeriesEncoder(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.norm = LayerNorm(cfg.d_model)

    def __call__(self, embeddings: Tensor, mask, abs_pos, n_global: int, rng=None) -> EncodedModality:
        x = embeddings
        for layer in self.layers:
            x = layer(x, mask, abs_pos, n_global, rng)
        x = self.norm(x)
        glob = x[:, :n_global] if n_global else None
        return EncodedModality(sequence=x, mask=np.asarray(mask, bool), global_outputs=glob)


def encode_time_series(embeddings: Tensor, seq, encoder: TimeSeriesEncoder, rng=None) -> EncodedModality:
    """Encode one embedded :class:`TokenSequence` (``embeddings`` is ``(L, d)``)."""
    emb = ad.as_tensor(embeddings)
    emb = emb.reshape((1,) + emb.shape)
    return encoder(emb, seq.attention_mask[None], seq.abs_pos[None], seq.n_global, rng)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 restricted to ``mask``; ``x`` is ``(B, L, d)``."""
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("cannot pool a sequence with no valid positions")
    return (x * (m / counts)[:, :, None]).sum(axis=1)


class NoteProjector(Module):
    """Linear map of note-chunk embeddings into the model width."""

    def __init__(self, embed_dim: int, d: int, rng: np.random.Generator):
        self.proj = Linear(embed_dim, d, rng)

    def __call__(self, chunks, mask=None) -> EncodedModality:
        chunks = ad.as_tensor(chunks)
        if chunks.ndim == 2:
            chunks = chunks.reshape((1,) + chunks.shape)
            mask = None if mask is None else np.asarray(mask, bool)[None]
        B, M, _ = chunks.shape
        if M == 0:
            raise ValueError("a record needs at least one note chunk")
        mask = np.ones((B, M), dtype=bool) if mask is None else np.asarray(mask, bool)
        if not mask.any(axis=1).all():
            raise ValueError("a record needs at least one note chunk")
        seq = self.proj(chunks)
        return EncodedModality(sequence=seq, mask=mask, pooled=masked_mean(seq, mask))


def project_notes(note_chunk_embeddings, projector: NoteProjector) -> EncodedModality:
    return projector(note_chunk_embeddings)
