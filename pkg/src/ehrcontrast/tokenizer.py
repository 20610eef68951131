"""Dynamic tokenisation of irregular event streams and the token embedding.

Tokens recorded at the same raw timestamp share one absolute position,
so the position index counts distinct measurement instants rather than
tokens. Global outcome tokens are prepended to every sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import CohortRecord
from .encoders import VariableEncoderBank
from .nn import Linear, Module, param

GLOBAL_VARIABLE = -1


class PositionLimitError(ValueError):
    pass


@dataclass
class TokenSequence:
    n_global: int
    variable_ids: np.ndarray
    values: np.ndarray
    times: np.ndarray
    abs_pos: np.ndarray
    attention_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.variable_ids)

    @property
    def n_real(self) -> int:
        return len(self) - self.n_global

    def real(self) -> slice:
        return slice(self.n_global, len(self))

    def to_text(self) -> str:
        lines = [f"# n_global={self.n_global} length={len(self)}", "index,kind,variable_id,abs_pos,time,value"]
        for i in range(len(self)):
            kind = "global" if i < self.n_global else "event"
            lines.append(
                f"{i},{kind},{int(self.variable_ids[i])},{int(self.abs_pos[i])},"
                f"{float(self.times[i])!r},{float(self.values[i])!r}"
            )
        return "\n".join(lines) + "\n"


def distinct_rank(timestamps: np.ndarray) -> np.ndarray:
    """Rank of each (sorted) timestamp among the distinct timestamps."""
    t = np.asarray(timestamps, dtype=np.float64)
    if len(t) == 0:
        return np.zeros(0, dtype=np.int64)
    if np.any(np.diff(t) < 0):
        raise ValueError("timestamps must be sorted ascending")
    return np.concatenate([[0], np.cumsum(np.diff(t) != 0)]).astype(np.int64)


def tokenize(record: CohortRecord, n_global: int, max_len: int = 512, p_max: int | None = None) -> TokenSequence:
    """Prepend ``n_global`` outcome tokens and lay out the record's events.

    ``max_len`` bounds the whole sequence, globals included; longer
    records keep their latest events. Positions are assigned after
    truncation, so they start at 0 for the first kept instant.
    """
    if n_global < 0:
        raise ValueError("n_global must be non-negative")
    if max_len <= n_global:
        raise ValueError(f"max_len {max_len} leaves no room after {n_global} global tokens")
    keep = max_len - n_global
    vid = record.variable_ids[-keep:] if record.n_events > keep else record.variable_ids
    ts = record.timestamps[-keep:] if record.n_events > keep else record.timestamps
    vals = record.values[-keep:] if record.n_events > keep else record.values
    pos = distinct_rank(ts)
    if p_max is not None and len(pos) and pos[-1] >= p_max:
        raise PositionLimitError(
            f"{record.patient_id}: {pos[-1] + 1} distinct timestamps exceed position limit {p_max}"
        )
    g = n_global
    n = len(vid)
    return TokenSequence(
        n_global=g,
        variable_ids=np.concatenate([np.full(g, GLOBAL_VARIABLE), vid]).astype(np.int64),
        values=np.concatenate([np.zeros(g), vals]),
        times=np.concatenate([np.zeros(g), ts]),
        abs_pos=np.concatenate([np.zeros(g, dtype=np.int64), pos]),
        attention_mask=np.ones(g + n, dtype=bool),
    )


def relative_bucket(abs_pos: np.ndarray, i: int, j: int, k: int) -> int:
    """Bucket of the position offset from token ``i`` to token ``j``, clipped to ``[-k, k]``."""
    if k < 1:
        raise ValueError("clip distance k must be >= 1")
    return int(np.clip(abs_pos[j] - abs_pos[i], -k, k) + k)


def relative_buckets(offsets, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("clip distance k must be >= 1")
    return (np.clip(offsets, -k, k) + k).astype(np.int64)


@dataclass
class TokenBatch:
    """Right-padded batch of token sequences sharing one global-token count."""

    n_global: int
    variable_ids: np.ndarray  # (B, L); globals and padding hold GLOBAL_VARIABLE
    values: np.ndarray
    times: np.ndarray
    abs_pos: np.ndarray
    mask: np.ndarray  # (B, L) bool, False on padding

    @property
    def shape(self) -> tuple[int, int]:
        return self.variable_ids.shape

    @classmethod
    def stack(cls, seqs: list[TokenSequence]) -> "TokenBatch":
        g = seqs[0].n_global
        if any(s.n_global != g for s in seqs):
            raise ValueError("all sequences in a batch need the same number of global tokens")
        L = max(len(s) for s in seqs)
        B = len(seqs)
        vid = np.full((B, L), GLOBAL_VARIABLE, dtype=np.int64)
        vals = np.zeros((B, L))
        times = np.zeros((B, L))
        pos = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        for b, s in enumerate(seqs):
            n = len(s)
            vid[b, :n] = s.variable_ids
            vals[b, :n] = s.values
            times[b, :n] = s.times
            pos[b, :n] = s.abs_pos
            mask[b, :n] = s.attention_mask
        return cls(g, vid, vals, times, pos, mask)


class Time2Vec(Module):
    """One linear and ``d_t - 1`` sinusoidal learnable time features."""

    def __init__(self, d_t: int, rng: np.random.Generator):
        if d_t < 2:
            raise ValueError("Time2Vec needs d_t >= 2")
        self.d_t = d_t
        self.w_np = param(rng.normal(scale=0.5))
        self.phi_np = param(rng.normal(scale=0.5))
        self.w_p = param(rng.normal(scale=1.0, size=d_t - 1))
        self.phi_p = param(rng.uniform(-np.pi, np.pi, size=d_t - 1))

    def __call__(self, t) -> Tensor:
        t = ad.as_tensor(t)
        tt = t.reshape(t.shape + (1,))
        linear = tt * self.w_np + self.phi_np
        periodic = ad.sin(tt * self.w_p + self.phi_p)
        return ad.concat([linear, periodic], axis=-1)


def time2vec(t, w_np: float, phi_np: float, w_p, phi_p) -> np.ndarray:
    """Plain numpy Time2Vec for fixed parameters."""
    t = np.asarray(t, dtype=np.float64)
    lin = w_np * t + phi_np
    per = np.sin(np.multiply.outer(t, np.asarray(w_p)) + np.asarray(phi_p))
    return np.concatenate([np.asarray(lin)[..., None], per], axis=-1)


class TokenEmbedding(Module):
    """Sum of value encoding, variable id, absolute position, projected
    Time2Vec and projected static context for each event token.

    Global tokens get a learned per-outcome vector plus the sentinel
    variable row and the static context.
    """

    def __init__(self, n_variables: int, static_dim: int, d: int, n_global: int, rng: np.random.Generator,
                 d_t: int = 8, p_max: int = 512, encoder_mode: str = "linear"):
        self.n_variables = n_variables
        self.d = d
        self.n_global = n_global
        self.p_max = p_max
        scale = 1.0 / np.sqrt(d)
        self.variable_table = param(rng.normal(scale=scale, size=(n_variables + 1, d)))
        self.position_table = param(rng.normal(scale=scale, size=(p_max, d)))
        self.global_table = param(rng.normal(scale=scale, size=(max(n_global, 1), d)))
        self.values = VariableEncoderBank(n_variables, d, rng, mode=encoder_mode)
        self.time2vec = Time2Vec(d_t, rng)
        self.time_proj = Linear(d_t, d, rng)
        self.static_proj = Linear(static_dim, d, rng)

    def __call__(self, batch: TokenBatch, static) -> Tensor:
        static = ad.as_tensor(static)
        B, L = batch.shape
        g = batch.n_global
        if g != self.n_global:
            raise ValueError(f"batch carries {g} global tokens, embedding was built for {self.n_global}")
        if static.ndim != 2 or static.shape[0] != B:
            raise ValueError(f"static features must be (B={B}, s), got {static.shape}")
        if int(batch.abs_pos.max(initial=0)) >= self.p_max:
            raise PositionLimitError(f"absolute position {int(batch.abs_pos.max())} >= P_max {self.p_max}")
        vid = batch.variable_ids[:, g:]
        real_vid = np.where(vid == GLOBAL_VARIABLE, 0, vid)
        real = (
            self.values(batch.values[:, g:], real_vid)
            + ad.embedding(self.variable_table, real_vid)
            + ad.embedding(self.position_table, batch.abs_pos[:, g:])
            + self.time_proj(self.time2vec(batch.times[:, g:]))
        )
        ctx = self.static_proj(static).reshape(B, 1, self.d)
        if g:
            glob = self.global_table[:g] + self.variable_table[self.n_variables]
            glob = ad.mul(glob.reshape(1, g, self.d), np.ones((B, 1, 1)))
            tokens = ad.concat([glob, real], axis=1) if L > g else glob
        else:
            tokens = real
        return tokens + ctx


def embed_tokens(seq: TokenSequence, embedding: TokenEmbedding, static_features) -> Tensor:
    """Embed one sequence; returns an ``(L, d)`` matrix."""
    batch = TokenBatch.stack([seq])
    static = np.asarray(static_features, dtype=np.float64).reshape(1, -1)
    out = embedding(batch, static)
    return out.reshape(out.shape[1:])
