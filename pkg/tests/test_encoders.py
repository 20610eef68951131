import numpy as np
import pytest

from ehrcontrast import autodiff as ad
from ehrcontrast.cohort import CohortRecord
from ehrcontrast.encoders import (
    AttentionConfig,
    NoteProjector,
    SlidingWindowAttention,
    TimeSeriesEncoder,
    VariableEncoderBank,
    dense_weights,
    encode_time_series,
    encode_value,
    project_notes,
    sliding_window_attention,
)
from ehrcontrast.tokenizer import tokenize
from oracles import dense_attention, gradcheck, param_gradcheck


def random_instance(rng, L, g, h=None, window=None, k_clip=3):
    h = h or int(rng.choice([1, 2]))
    d = 4 * h
    window = window if window is not None else L + 1
    cfg = AttentionConfig(d_model=d, window=window, n_heads=h, n_global=g, rel_clip=k_clip)
    attn = SlidingWindowAttention(cfg, rng)
    for lin in (attn.q, attn.k, attn.v, attn.o):
        lin.bias.data[:] = rng.normal(scale=0.3, size=lin.bias.shape)
    attn.eval()
    x = rng.normal(size=(L, d))
    mask = np.ones(L, dtype=bool)
    n_pad = int(rng.integers(0, max(1, (L - g) // 2)))
    if n_pad and L - n_pad > g:
        mask[L - n_pad:] = False
    pos = np.zeros(L, dtype=np.int64)
    pos[g:] = np.sort(rng.integers(0, 8, size=L - g))
    return attn, x, mask, pos


def oracle(attn, x, mask, pos, g, window=None):
    return dense_attention(
        x, mask, pos, g, attn.q.weight.data, attn.q.bias.data, attn.k.weight.data, attn.k.bias.data,
        attn.v.weight.data, attn.v.bias.data, attn.o.weight.data, attn.o.bias.data, attn.rel_table.data,
        attn.cfg.rel_clip, attn.cfg.n_heads, window,
    )


# ---- value encoders --------------------------------------------------------

def test_value_encoder_examples():
    bank = VariableEncoderBank(3, 5, np.random.default_rng(0))
    np.testing.assert_array_equal(encode_value(0.0, 1, bank).data, bank.bias.data[1])
    e0, e1, e2 = (encode_value(v, 2, bank).data for v in (0.0, 0.7, 1.4))
    np.testing.assert_allclose(e2 - e1, e1 - e0, atol=1e-15)


def test_linear_and_shared_modes():
    lin = VariableEncoderBank(4, 5, np.random.default_rng(0), mode="linear")
    shared = VariableEncoderBank(4, 5, np.random.default_rng(0), mode="shared-linear")
    assert lin.n_encoders == 4 and shared.n_encoders == 1
    assert not np.allclose(encode_value(1.0, 0, lin).data, encode_value(1.0, 3, lin).data)
    np.testing.assert_array_equal(encode_value(1.0, 0, shared).data, encode_value(1.0, 3, shared).data)


def test_unknown_variable_rejected():
    bank = VariableEncoderBank(2, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        encode_value(1.0, 2, bank)
    with pytest.raises(ValueError):
        VariableEncoderBank(2, 3, np.random.default_rng(0), mode="conv")


# ---- attention -------------------------------------------------------------

def test_wide_window_equals_dense_attention():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        L = int(rng.integers(1, 33))
        g = int(rng.integers(0, min(4, L)))
        attn, x, mask, pos = random_instance(rng, L, g)
        out = sliding_window_attention(x, mask, pos, g, attn).data
        worst = max(worst, np.abs(out - oracle(attn, x, mask, pos, g))[mask].max())
    assert worst < 1e-9


@pytest.mark.parametrize("window", [1, 2, 3])
def test_narrow_window_matches_windowed_oracle(window):
    rng = np.random.default_rng(window)
    for _ in range(10):
        L = int(rng.integers(3, 20))
        g = int(rng.integers(0, 3))
        attn, x, mask, pos = random_instance(rng, L, g, window=window)
        out = sliding_window_attention(x, mask, pos, g, attn).data
        ref = oracle(attn, x, mask, pos, g, window=window)
        assert np.abs(out - ref)[mask].max() < 1e-9


def _weights(attn, x, mask, pos, g):
    attn(ad.as_tensor(x[None]), mask[None], pos[None], g, keep_weights=True)
    gw, lw = attn.last_weights
    return dense_weights(gw, lw, len(x), g, attn.cfg.window)[0]


def test_weights_vanish_outside_window_and_rows_sum_to_one():
    rng = np.random.default_rng(3)
    L, g, w = 20, 2, 3
    attn, x, mask, pos = random_instance(rng, L, g, h=2, window=w)
    W = _weights(attn, x, mask, pos, g)
    for i in range(g, L):
        if not mask[i]:
            continue
        for j in range(g, L):
            if abs(i - j) > w or not mask[j]:
                assert np.all(W[:, i, j] == 0.0)
        assert np.all(np.abs(W[:, i].sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(W[:, :g, ~mask] == 0.0)
    assert np.all(W[:, :g, mask] > 0.0)


def test_zero_queries_give_uniform_weights():
    rng = np.random.default_rng(4)
    L, g, w = 12, 2, 2
    attn, x, mask, pos = random_instance(rng, L, g, h=1, window=w)
    mask[:] = True
    for lin in (attn.q, attn.k):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    W = _weights(attn, x, mask, pos, g)[0]
    for i in range(L):
        visible = W[i] > 0
        expected = L if i < g else g + sum(1 for j in range(g, L) if abs(i - j) <= w)
        assert visible.sum() == expected
        np.testing.assert_allclose(W[i, visible], 1.0 / expected, atol=1e-15)


def test_score_buffer_is_linear_in_length():
    w, g, h = 4, 3, 2
    sizes = [SlidingWindowAttention.score_buffer_size(L, g, w, h) for L in range(g, 400)]
    assert np.all(np.diff(sizes, n=2) == 0)
    assert sizes[1] - sizes[0] == h * (2 * w + 1 + 2 * g)


def test_score_buffer_matches_forward_pass():
    rng = np.random.default_rng(5)
    for L in (5, 17, 40):
        attn, x, mask, pos = random_instance(rng, L, 2, h=2, window=3)
        attn(ad.as_tensor(x[None]), mask[None], pos[None], 2)
        assert attn.last_score_entries == SlidingWindowAttention.score_buffer_size(L, 2, 3, 2)


def test_fully_masked_sequence_rejected():
    rng = np.random.default_rng(6)
    attn, x, mask, pos = random_instance(rng, 5, 0, window=2)
    with pytest.raises(ValueError):
        attn(ad.as_tensor(x[None]), np.zeros((1, 5), dtype=bool), pos[None], 0)


def test_masked_global_token_rejected():
    rng = np.random.default_rng(6)
    attn, x, mask, pos = random_instance(rng, 5, 2, window=2)
    mask[0] = False
    with pytest.raises(ValueError):
        sliding_window_attention(x, mask, pos, 2, attn)


def test_attention_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(window=0)
    with pytest.raises(ValueError):
        AttentionConfig(d_model=10, n_heads=3)


@pytest.mark.parametrize("seed", range(6))
def test_attention_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    L, g = int(rng.integers(3, 17)), int(rng.integers(0, 3))
    attn, x, mask, pos = random_instance(rng, L, g, window=int(rng.integers(1, 4)))
    weight = rng.normal(size=x.shape) * mask[:, None]

    def build(xx):
        return sliding_window_attention(xx, mask, pos, g, attn) * weight

    assert gradcheck(build, [x], rng) < 1e-5
    xt = ad.Tensor(x)
    params = [attn.q.weight, attn.q.bias, attn.k.weight, attn.v.weight, attn.o.weight, attn.o.bias, attn.rel_table]
    assert param_gradcheck(lambda: (sliding_window_attention(xt, mask, pos, g, attn) * weight).sum(), params) < 1e-5


# ---- encoder stack ---------------------------------------------------------

def _record(times, vids, values):
    return CohortRecord.from_events("r", [0.0], list(zip(vids, times, values)), np.zeros((1, 2)), np.ones(2), [0])


def _encoder(seed=0, layers=1):
    cfg = AttentionConfig(d_model=8, window=2, n_heads=2, n_layers=layers, n_global=9, rel_clip=3)
    enc = TimeSeriesEncoder(cfg, np.random.default_rng(seed))
    enc.eval()
    return enc


def test_nine_globals_in_nine_out():
    seq = tokenize(_record([1, 2, 2, 3], [0, 1, 2, 0], [0.1, 0.2, 0.3, 0.4]), 9)
    emb = np.random.default_rng(1).normal(size=(len(seq), 8))
    out = encode_time_series(emb, seq, _encoder())
    assert out.global_outputs.shape == (1, 9, 8)
    again = encode_time_series(emb, seq, _encoder())
    np.testing.assert_array_equal(out.sequence.data, again.sequence.data)


def test_swapping_tied_tokens_keeps_global_outputs():
    rng = np.random.default_rng(2)
    seq = tokenize(_record([1, 2, 2, 3, 4], [0, 1, 2, 0, 1], [0.1, 0.2, 0.3, 0.4, 0.5]), 9)
    emb = rng.normal(size=(len(seq), 8))
    swapped = emb.copy()
    swapped[[11, 12]] = swapped[[12, 11]]
    enc = _encoder()
    a = encode_time_series(emb, seq, enc).global_outputs.data
    b = encode_time_series(swapped, seq, enc).global_outputs.data
    assert np.abs(a - b).max() < 1e-9


# ---- notes -----------------------------------------------------------------

def test_single_chunk_pooled_equals_projection():
    proj = NoteProjector(4, 6, np.random.default_rng(0))
    chunk = np.random.default_rng(1).normal(size=(1, 4))
    out = project_notes(chunk, proj)
    assert out.sequence.shape == (1, 1, 6)
    np.testing.assert_allclose(out.pooled.data[0], out.sequence.data[0, 0])


def test_pooled_equals_projection_of_average():
    proj = NoteProjector(4, 6, np.random.default_rng(0))
    proj.proj.bias.data[:] = np.random.default_rng(2).normal(size=6)
    chunks = np.random.default_rng(1).normal(size=(5, 4))
    out = project_notes(chunks, proj)
    np.testing.assert_allclose(out.pooled.data[0], proj.proj(chunks.mean(axis=0)).data, atol=1e-12)
    zero = project_notes(np.zeros((3, 4)), proj)
    np.testing.assert_allclose(zero.pooled.data[0], proj.proj.bias.data)


def test_note_projector_needs_a_chunk():
    proj = NoteProjector(4, 6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        project_notes(np.zeros((0, 4)), proj)
