"""Splitting, the training loop, evaluation and checkpoint resume."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import autodiff as ad
from .checkpoint import Checkpoint, restore_rng, rng_state
from .cohort import CohortRecord, DescriptorAugmenter, NormalizationStats, apply_stats, fit_stats
from .config import TrainConfig, parse_config
from .metrics import EvalReport, evaluate_scores
from .model import Batch, EHRContrastModel, ModelConfig
from .nn import Adam
from .objectives import LossReport, alignment_loss, multilabel_ce, total_loss
from .tokenizer import TokenBatch, TokenSequence, tokenize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def split_cohort(cohort: list[CohortRecord], fractions, seed: int):
    """Patient-level random partition into ``(train, val, test)``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(cohort)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    idx = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple([cohort[i] for i in sorted(part)] for part in idx)


@dataclass
class Splits:
    train: list[CohortRecord]
    val: list[CohortRecord]
    test: list[CohortRecord]
    stats: NormalizationStats
    flagged: list[int] = field(default_factory=list)

    def get(self, name: str) -> list[CohortRecord]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def resolve_dims(cfg: TrainConfig, cohort: list[CohortRecord]) -> TrainConfig:
    """Fill the data-dependent model sizes left at 0 in ``cfg``."""
    if not cohort:
        raise ValueError("empty cohort")
    first = cohort[0]
    max_vid = max((int(r.variable_ids.max()) for r in cohort if r.n_events), default=0)
    return cfg.replace(
        n_variables=cfg.n_variables or max_vid + 1,
        static_dim=cfg.static_dim or len(first.static),
        embed_dim=cfg.embed_dim or first.embed_dim,
        n_outcomes=cfg.n_outcomes or len(first.labels),
    )


def prepare_splits(cohort: list[CohortRecord], cfg: TrainConfig) -> Splits:
    """Split, fit normalisation on train only, normalise all splits, augment if the regime asks."""
    train, val, test = split_cohort(cohort, cfg.fractions, cfg.seed)
    if not train:
        raise ValueError("training split is empty")
    stats = fit_stats(train, cfg.n_variables)
    train, val, test = ([apply_stats(r, stats) for r in part] for part in (train, val, test))
    positives = np.vstack([r.labels for r in train]).sum(axis=0)
    flagged = [int(o) for o in np.flatnonzero(positives == 0)]
    for o in flagged:
        warnings.warn(f"outcome {o} has no positive cases in the training split", stacklevel=2)
    if cfg.augmented:
        aug = DescriptorAugmenter(cfg.n_variables, cfg.embed_dim, lam=cfg.augment_lambda)
        train, val, test = ([aug(r) for r in part] for part in (train, val, test))
    return Splits(train, val, test, stats, flagged)


def model_config(cfg: TrainConfig) -> ModelConfig:
    if not (cfg.n_variables and cfg.static_dim and cfg.embed_dim and cfg.n_outcomes):
        raise ValueError("model sizes unresolved; call resolve_dims first")
    return ModelConfig(
        n_variables=cfg.n_variables, static_dim=cfg.static_dim, embed_dim=cfg.embed_dim,
        n_outcomes=cfg.n_outcomes, d=cfg.d, d_t=cfg.d_t, d_f=cfg.d_f, d_c=cfg.d_c, window=cfg.window,
        rel_clip=cfg.rel_clip, n_heads=cfg.n_heads, n_layers=cfg.n_layers, dropout=cfg.dropout,
        max_len=cfg.max_len, p_max=cfg.p_max, encoder_mode=cfg.encoder_mode,
    )


class BatchSource:
    """Tokenises each record once and assembles batches by index."""

    def __init__(self, records: list[CohortRecord], cfg: TrainConfig):
        self.records = records
        self.n_global = cfg.n_outcomes
        self.seqs: list[TokenSequence] = [tokenize(r, self.n_global, cfg.max_len, cfg.p_max) for r in records]

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx) -> Batch:
        recs = [self.records[i] for i in idx]
        M = max(len(r.note_chunks) for r in recs)
        e = recs[0].embed_dim
        notes = np.zeros((len(recs), M, e))
        note_mask = np.zeros((len(recs), M), dtype=bool)
        for j, r in enumerate(recs):
            notes[j, : len(r.note_chunks)] = r.note_chunks
            note_mask[j, : len(r.note_chunks)] = True
        return Batch(
            patient_ids=[r.patient_id for r in recs],
            tokens=TokenBatch.stack([self.seqs[i] for i in idx]),
            static=np.vstack([r.static for r in recs]),
            notes=notes,
            note_mask=note_mask,
            discharge=np.vstack([r.discharge for r in recs]),
            labels=np.vstack([r.labels for r in recs]),
        )

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Model, optimizer and the single RNG stream used for shuffling and dropout."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        seq = np.random.SeedSequence(cfg.seed)
        init_seq, train_seq = seq.spawn(2)
        self.model = EHRContrastModel(model_config(cfg), np.random.default_rng(init_seq))
        self.optimizer = Adam(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(train_seq)
        self.epoch = 0
        self.weights = cfg.loss_weights()

    def losses(self, batch: Batch, out) -> LossReport:
        cfg = self.cfg
        if cfg.contrast_kind == "intermodal":
            l_md, l_dm, _ = alignment_loss(out.h_time, out.h_note, cfg.tau, cfg.denominator_mode)
        else:
            l_md, l_dm, _ = alignment_loss(out.fused.projection_m, out.h_d, cfg.tau, cfg.denominator_mode)
        l_ce = multilabel_ce(out.logits, batch.labels)
        return total_loss(l_md, l_dm, l_ce, self.weights)

    def step(self, batch: Batch) -> LossReport:
        self.model.train()
        out = self.model(batch, self.rng)
        report = self.losses(batch, out)
        if not math.isfinite(report.l_total):
            raise TrainingError(f"non-finite loss at epoch {self.epoch}")
        report.loss.backward()
        self.optimizer.step()
        self.optimizer.zero_grad()
        return report

    def checkpoint(self) -> Checkpoint:
        opt = {"t": np.array(float(self.optimizer.state["t"]))}
        for name, m in self.optimizer.state["m"].items():
            opt[f"m.{name}"] = m.copy()
            opt[f"v.{name}"] = self.optimizer.state["v"][name].copy()
        return Checkpoint(self.cfg.to_text(), self.model.state_dict(), opt, self.epoch, rng_state(self.rng))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Trainer":
        trainer = cls(parse_config(ckpt.config_text))
        trainer.model.load_state_dict(ckpt.params)
        state = {"t": int(ckpt.optimizer.get("t", np.array(0.0))), "m": {}, "v": {}}
        for key, arr in ckpt.optimizer.items():
            if key.startswith("m."):
                state["m"][key[2:]] = arr.copy()
            elif key.startswith("v."):
                state["v"][key[2:]] = arr.copy()
        trainer.optimizer.state = state
        trainer.epoch = ckpt.epoch
        if ckpt.rng_state:
            trainer.rng = restore_rng(ckpt.rng_state)
        return trainer


def predict(model: EHRContrastModel, source: BatchSource, batch_size: int = 128):
    """Eval-mode probabilities, labels and head features for every record."""
    model.eval()
    probs, labels, feats = [], [], []
    with ad.no_grad():
        for batch in source.batches(batch_size):
            out = model(batch)
            z = out.logits.data
            probs.append(0.5 * (1.0 + np.tanh(0.5 * z)))
            labels.append(batch.labels)
            feats.append(out.features.data)
    return np.vstack(probs), np.vstack(labels), np.concatenate(feats, axis=0)


def fit_probe(model: EHRContrastModel, source: BatchSource, c: float = 1.0) -> None:
    """Fit each outcome head by logistic regression on frozen features."""
    _, labels, feats = predict(model, source)
    for o in range(labels.shape[1]):
        y = labels[:, o]
        if y.min() == y.max():
            continue
        clf = LogisticRegression(C=c, max_iter=2000)
        clf.fit(feats[:, o, :], y)
        model.head_weight.data[o] = clf.coef_[0]
        model.head_bias.data[o] = clf.intercept_[0]


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[dict]
    loss_trace: list[float]
    best_val: EvalReport | None
    trainer: Trainer
    splits: Splits


def train(cfg: TrainConfig, cohort: list[CohortRecord]) -> TrainResult:
    """Train under ``cfg.loss_regime``, keeping the checkpoint with the best validation mean AUROC."""
    cfg = resolve_dims(cfg, cohort)
    splits = prepare_splits(cohort, cfg)
    if not splits.train:
        raise ValueError("training split is empty")
    trainer = Trainer(cfg)
    train_src = BatchSource(splits.train, cfg)
    val_src = BatchSource(splits.val, cfg) if splits.val else None
    probe = not cfg.uses_ce
    history: list[dict] = []
    trace: list[float] = []
    best, best_val, best_score = None, None, -np.inf

    for epoch in range(cfg.epochs):
        trainer.epoch = epoch
        order = trainer.rng.permutation(len(train_src))
        sums = {"L_total": 0.0, "L_alignment": 0.0, "L_ce": 0.0}
        n_batches = 0
        for b, batch in enumerate(train_src.batches(cfg.batch_size, order)):
            try:
                report = trainer.step(batch)
            except TrainingError:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}") from None
            trace.append(report.l_total)
            for k in sums:
                sums[k] += report.as_dict()[k]
            n_batches += 1
        trainer.epoch = epoch + 1
        if probe:
            fit_probe(trainer.model, train_src, cfg.probe_c)
        entry = {"epoch": epoch + 1, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        if val_src is not None:
            scores, labels, _ = predict(trainer.model, val_src)
            rep = evaluate_scores(scores, labels, cfg.loss_regime, cfg.seed)
            entry["val_mean_auroc"] = rep.mean
            score = rep.mean if not np.isnan(rep.mean) else -np.inf
        else:
            rep, score = None, float(epoch)
        history.append(entry)
        log.info("epoch %d %s", epoch + 1, entry)
        if best is None or score > best_score:
            best, best_val, best_score = trainer.checkpoint(), rep, score

    if best is None:
        if probe:
            fit_probe(trainer.model, train_src, cfg.probe_c)
        best = trainer.checkpoint()
    return TrainResult(best, history, trace, best_val, trainer, splits)


def evaluate(ckpt: Checkpoint, cohort: list[CohortRecord], split: str = "test") -> EvalReport:
    """Rebuild the model from ``ckpt`` and score one split of ``cohort``.

    The split and its normalisation are recomputed from the stored
    config, so the same cohort file yields the same partition.
    """
    trainer = Trainer.from_checkpoint(ckpt)
    cfg = trainer.cfg
    records = prepare_splits(cohort, cfg).get(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    scores, labels, _ = predict(trainer.model, BatchSource(records, cfg))
    report = evaluate_scores(scores, labels, cfg.loss_regime, cfg.seed)
    for o in report.excluded:
        warnings.warn(f"outcome {o} has a single class in split {split!r}; excluded from the mean", stacklevel=2)
    return report
