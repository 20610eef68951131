"""Rank-statistic AUROC and multitask evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half.

    Returns NaN when ``labels`` hold only one class.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairs(scores, labels) -> float:
    """Exhaustive pair counting; quadratic, for checking :func:`auroc`."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    p, n = s[y == 1], s[y == 0]
    if len(p) == 0 or len(n) == 0:
        return float("nan")
    wins = 0.0
    for sp in p:
        for sn in n:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(p) * len(n))


@dataclass
class EvalReport:
    per_outcome: list[float]
    positives: list[int]
    regime: str = ""
    seed: int = 0
    excluded: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        vals = [a for i, a in enumerate(self.per_outcome) if i not in self.excluded]
        return float(np.mean(vals)) if vals else float("nan")

    def as_row(self) -> dict:
        row = {"regime": self.regime, "seed": self.seed, "mean_auroc": self.mean}
        for i, a in enumerate(self.per_outcome):
            row[f"auroc_{i}"] = a
        return row


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, regime: str = "", seed: int = 0) -> EvalReport:
    """Per-outcome AUROC over columns; single-class outcomes are excluded from the mean."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per, excluded = [], []
    for o in range(labels.shape[1]):
        a = auroc(scores[:, o], labels[:, o])
        if np.isnan(a):
            excluded.append(o)
        per.append(a)
    return EvalReport(per, labels.sum(axis=0).astype(int).tolist(), regime, seed, excluded)
