"""Walk one synthetic patient through tokenization and windowed attention.

Run: python3 demos/tokenize_and_attend.py
"""

import numpy as np

from ehrcontrast import autodiff as ad
from ehrcontrast.cohort import SyntheticConfig, generate_synthetic_cohort
from ehrcontrast.encoders import AttentionConfig, SlidingWindowAttention, dense_weights
from ehrcontrast.tokenizer import tokenize

cohort = generate_synthetic_cohort(SyntheticConfig(n_patients=5, mean_seq_len=12, seed=3))
record = cohort[0]
print(f"patient {record.patient_id}: {record.n_events} events, labels {record.labels.tolist()}")

# Events recorded at the same instant share one position index.
seq = tokenize(record, n_global=3)
print(seq.to_text())

# A window of 2 lets each event see its two neighbours on either side plus the global tokens.
cfg = AttentionConfig(d_model=8, window=2, n_heads=1, n_global=3, rel_clip=4)
attn = SlidingWindowAttention(cfg, np.random.default_rng(0))
attn.eval()
x = np.random.default_rng(1).normal(size=(len(seq), 8))
mask = np.ones(len(seq), dtype=bool)
attn(ad.as_tensor(x[None]), mask[None], seq.abs_pos[None], 3, keep_weights=True)
weights = dense_weights(*attn.last_weights, len(seq), 3, cfg.window)[0, 0]

np.set_printoptions(precision=2, suppress=True, linewidth=160)
print("\nattention weights (rows are queries; zeros fall outside the window)")
print(weights[: min(12, len(seq)), : min(12, len(seq))])
print(f"score entries stored: {attn.last_score_entries} (dense would need {len(seq) ** 2})")
