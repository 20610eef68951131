"""Small cohorts and configs that keep training tests fast."""

from functools import lru_cache

from ehrcontrast.cohort import SyntheticConfig, generate_synthetic_cohort
from ehrcontrast.config import TrainConfig

TINY = dict(epochs=2, batch_size=16, d=8, d_t=4, d_f=8, d_c=8, window=2, rel_clip=2, max_len=64, p_max=128,
            lr=1e-3)


@lru_cache(maxsize=None)
def _cohort(n, seed):
    return tuple(generate_synthetic_cohort(SyntheticConfig(n_patients=n, mean_seq_len=10, seed=seed)))


def tiny_cohort(n=60, seed=0):
    return list(_cohort(n, seed))


def tiny_config(**changes):
    return TrainConfig(**{**TINY, **changes})
