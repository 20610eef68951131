"""Cohort records, file formats, train-split normalisation and synthetic cohorts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.stats import norm

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"EHREMB1\0"
STD_FLOOR = 1e-6


class CohortFormatError(ValueError):
    """A cohort file line could not be parsed into a record."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class TimeSeriesEvent(NamedTuple):
    variable_id: int
    timestamp: float
    value: float


@dataclass
class CohortRecord:
    """One patient encounter.

    Events are held column-wise (``variable_ids``, ``timestamps``,
    ``values``) and kept sorted by timestamp; ties keep insertion order.
    Missing static features are NaN.
    """

    patient_id: str
    static: np.ndarray
    variable_ids: np.ndarray
    timestamps: np.ndarray
    values: np.ndarray
    note_chunks: np.ndarray
    discharge: np.ndarray
    labels: np.ndarray
    discharge_original: np.ndarray | None = None

    def __post_init__(self):
        self.static = np.asarray(self.static, dtype=np.float64).reshape(-1)
        vid = np.asarray(self.variable_ids, dtype=np.int64).reshape(-1)
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not (len(vid) == len(ts) == len(vals)):
            raise ValueError("event columns must have equal length")
        if not np.all(np.isfinite(ts)):
            raise ValueError(f"{self.patient_id}: non-finite timestamp")
        if np.any(vid < 0):
            raise ValueError(f"{self.patient_id}: negative variable id")
        order = np.argsort(ts, kind="stable")
        self.variable_ids, self.timestamps, self.values = vid[order], ts[order], vals[order]
        chunks = np.asarray(self.note_chunks, dtype=np.float64)
        self.note_chunks = chunks.reshape(len(chunks), -1) if chunks.size else chunks.reshape(0, len(self.discharge))
        self.discharge = np.asarray(self.discharge, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels)
        if labels.size and not np.all(np.isin(labels, (0, 1))):
            raise ValueError(f"{self.patient_id}: labels must be 0/1, got {labels.tolist()}")
        self.labels = labels.astype(np.int64).reshape(-1)
        if self.note_chunks.shape[1] != self.discharge.shape[0]:
            raise ValueError(
                f"{self.patient_id}: note chunk dim {self.note_chunks.shape[1]} "
                f"!= discharge dim {self.discharge.shape[0]}"
            )

    @classmethod
    def from_events(cls, patient_id: str, static, events: Iterable[Sequence[float]], note_chunks,
                    discharge, labels) -> "CohortRecord":
        ev = [tuple(e) for e in events]
        vid = [int(e[0]) for e in ev]
        ts = [float(e[1]) for e in ev]
        vals = [float(e[2]) for e in ev]
        return cls(patient_id, static, vid, ts, vals, note_chunks, discharge, labels)

    @property
    def events(self) -> list[TimeSeriesEvent]:
        return [TimeSeriesEvent(int(v), float(t), float(x))
                for v, t, x in zip(self.variable_ids, self.timestamps, self.values)]

    @property
    def n_events(self) -> int:
        return len(self.timestamps)

    @property
    def embed_dim(self) -> int:
        return self.discharge.shape[0]

    def replace(self, **changes) -> "CohortRecord":
        return dataclasses.replace(self, **changes)

    def equals(self, other: "CohortRecord", atol: float = 0.0) -> bool:
        if self.patient_id != other.patient_id:
            return False
        pairs = [
            (self.static, other.static),
            (self.timestamps, other.timestamps),
            (self.values, other.values),
            (self.note_chunks, other.note_chunks),
            (self.discharge, other.discharge),
        ]
        if not np.array_equal(self.variable_ids, other.variable_ids):
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        for a, b in pairs:
            if a.shape != b.shape:
                return False
            if not np.allclose(a, b, rtol=0.0, atol=atol, equal_nan=True):
                return False
        return True


# ---------------------------------------------------------------------------
# file formats


def _record_to_json(r: CohortRecord) -> str:
    static = [None if math.isnan(x) else float(x) for x in r.static]
    obj = {
        "patient_id": r.patient_id,
        "static": static,
        "events": [[int(v), float(t), float(x)] for v, t, x in zip(r.variable_ids, r.timestamps, r.values)],
        "note_chunks": r.note_chunks.tolist(),
        "discharge": r.discharge.tolist(),
        "labels": r.labels.tolist(),
    }
    return json.dumps(obj, separators=(",", ":"))


def save_cohort(records: Sequence[CohortRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_record_to_json(r))
            fh.write("\n")


def _parse_line(line: str, lineno: int) -> CohortRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CohortFormatError(lineno, f"malformed record ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise CohortFormatError(lineno, "record must be an object")
    required = ("patient_id", "static", "events", "note_chunks", "discharge", "labels")
    missing = [k for k in required if k not in obj]
    if missing:
        raise CohortFormatError(lineno, f"missing fields {missing}")
    labels = obj["labels"]
    if not all(lab in (0, 1) and not isinstance(lab, bool) for lab in labels):
        raise CohortFormatError(lineno, f"labels must be 0 or 1, got {labels}")
    try:
        static = [np.nan if x is None else float(x) for x in obj["static"]]
        events = obj["events"]
        if any(len(e) != 3 for e in events):
            raise ValueError("events must be [variable_id, timestamp, value] triples")
        chunks = np.asarray(obj["note_chunks"], dtype=np.float64)
        discharge = np.asarray(obj["discharge"], dtype=np.float64)
        if chunks.size and (chunks.ndim != 2 or chunks.shape[1] != discharge.shape[0]):
            raise ValueError(
                f"embedding dimension disagreement: note chunks {chunks.shape}, discharge {discharge.shape}"
            )
        return CohortRecord.from_events(str(obj["patient_id"]), static, events, chunks, discharge, labels)
    except (TypeError, ValueError) as exc:
        raise CohortFormatError(lineno, str(exc)) from None


def load_cohort(path) -> list[CohortRecord]:
    """Read a cohort file, one JSON object per line; blank lines are skipped."""
    records: list[CohortRecord] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line, lineno)
            if dim is None:
                dim = rec.embed_dim
            elif rec.embed_dim != dim:
                raise CohortFormatError(lineno, f"embedding dimension {rec.embed_dim} != cohort dimension {dim}")
            records.append(rec)
    counts = cohort_counts(records)
    log.info("loaded %d records, %d events from %s", counts["records"], counts["events"], path)
    return records


def cohort_counts(records: Sequence[CohortRecord]) -> dict[str, int]:
    return {
        "records": len(records),
        "events": int(sum(r.n_events for r in records)),
        "note_chunks": int(sum(len(r.note_chunks) for r in records)),
    }


def write_embedding_matrix(path, matrix) -> None:
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def read_embedding_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    rows, dim = struct.unpack_from("<II", raw, 8)
    payload = raw[16:]
    if len(payload) != rows * dim * 4:
        raise ValueError(f"{path}: expected {rows * dim * 4} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormalizationStats:
    var_mean: np.ndarray
    var_std: np.ndarray
    static_median: np.ndarray
    time_mean: float
    time_std: float
    static_mean: np.ndarray | None = None
    static_std: np.ndarray | None = None

    def __post_init__(self):
        k = len(self.static_median)
        if self.static_mean is None:
            object.__setattr__(self, "static_mean", np.zeros(k))
        if self.static_std is None:
            object.__setattr__(self, "static_std", np.ones(k))

    @property
    def n_variables(self) -> int:
        return len(self.var_mean)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.var_mean, self.var_std, self.static_median, self.static_mean, self.static_std):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(struct.pack("<dd", self.time_mean, self.time_std))
        return h.hexdigest()


def _floored_std(x: np.ndarray) -> float:
    s = float(np.std(x)) if len(x) else 0.0
    return 1.0 if s < STD_FLOOR else s


def fit_stats(train: Sequence[CohortRecord], n_variables: int) -> NormalizationStats:
    """Per-variable mean/std, static medians and timestamp mean/std from training records."""
    if not train:
        raise ValueError("cannot fit normalisation statistics on an empty training split")
    vid = np.concatenate([r.variable_ids for r in train])
    vals = np.concatenate([r.values for r in train])
    ts = np.concatenate([r.timestamps for r in train])
    if len(vid) and vid.max() >= n_variables:
        raise ValueError(f"variable id {int(vid.max())} outside [0, {n_variables})")
    means = np.zeros(n_variables)
    stds = np.ones(n_variables)
    for v in range(n_variables):
        x = vals[vid == v]
        if len(x):
            means[v] = x.mean()
            stds[v] = _floored_std(x)
    static = np.vstack([r.static for r in train])
    observed = ~np.isnan(static)
    medians = np.array([np.median(static[observed[:, j], j]) if observed[:, j].any() else 0.0
                        for j in range(static.shape[1])])
    filled = np.where(observed, static, medians)
    t_mean = float(ts.mean()) if len(ts) else 0.0
    s_std = np.array([_floored_std(filled[:, j]) for j in range(filled.shape[1])])
    return NormalizationStats(means, stds, medians, t_mean, _floored_std(ts), filled.mean(axis=0), s_std)


def apply_stats(record: CohortRecord, stats: NormalizationStats) -> CohortRecord:
    """Return a normalised copy of ``record``.

    Event values are z-scored per variable and timestamps globally. Missing
    static entries take the training median, then every static column is
    z-scored so raw units cannot swamp the token embedding.
    """
    vid = record.variable_ids
    if len(vid) and vid.max() >= stats.n_variables:
        raise ValueError(f"{record.patient_id}: unseen variable id {int(vid.max())} (V={stats.n_variables})")
    if len(record.static) != len(stats.static_median):
        raise ValueError(
            f"{record.patient_id}: {len(record.static)} static features, stats expect {len(stats.static_median)}"
        )
    values = (record.values - stats.var_mean[vid]) / stats.var_std[vid]
    times = (record.timestamps - stats.time_mean) / stats.time_std
    static = np.where(np.isnan(record.static), stats.static_median, record.static)
    static = (static - stats.static_mean) / stats.static_std
    return record.replace(static=static, values=values, timestamps=times, variable_ids=vid.copy())


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class SyntheticConfig:
    n_patients: int = 2000
    n_variables: int = 6
    mean_seq_len: int = 64
    n_outcomes: int = 3
    latent_time_dim: int = 4
    latent_note_dim: int = 4
    shared_info: float = 0.2
    label_noise: float = 0.02
    embed_dim: int = 16
    n_numeric_static: int = 2
    n_categories: int = 3
    static_missing_rate: float = 0.1
    max_note_chunks: int = 4
    event_noise: float = 0.5
    note_noise: float = 0.3
    discharge_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.shared_info <= 1.0:
            raise ValueError(f"shared_info must lie in [0, 1], got {self.shared_info}")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        for name in ("n_patients", "n_variables", "mean_seq_len", "n_outcomes", "latent_time_dim",
                     "latent_note_dim", "embed_dim", "max_note_chunks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def static_dim(self) -> int:
        return self.n_numeric_static + self.n_categories


@dataclass
class _Structure:
    """Cohort-wide generating parameters shared by every patient."""

    var_mean: np.ndarray
    var_scale: np.ndarray
    level_loading: np.ndarray
    trend_loading: np.ndarray
    note_map: np.ndarray
    discharge_map: np.ndarray
    readout: np.ndarray
    thresholds: np.ndarray
    static_loc: np.ndarray
    static_scale: np.ndarray


def _structure(cfg: SyntheticConfig) -> _Structure:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    V, a, b, e = cfg.n_variables, cfg.latent_time_dim, cfg.latent_note_dim, cfg.embed_dim
    level = rng.normal(size=(V, a)) / np.sqrt(a)
    trend = 0.5 * rng.normal(size=(V, a)) / np.sqrt(a)
    note_map = rng.normal(size=(e, b)) / np.sqrt(b)
    discharge_map = rng.normal(size=(e, a + b)) / np.sqrt(a + b)
    readout = rng.normal(size=(cfg.n_outcomes, a + b))
    readout /= np.linalg.norm(readout, axis=1, keepdims=True)
    prevalence = np.linspace(0.3, 0.15, cfg.n_outcomes)
    return _Structure(
        var_mean=rng.uniform(20.0, 120.0, size=V),
        var_scale=rng.uniform(2.0, 15.0, size=V),
        level_loading=level,
        trend_loading=trend,
        note_map=note_map,
        discharge_map=discharge_map,
        readout=readout,
        thresholds=norm.ppf(1.0 - prevalence),
        static_loc=rng.uniform(-1.0, 1.0, size=cfg.n_numeric_static) * 10 + 50,
        static_scale=rng.uniform(5.0, 15.0, size=cfg.n_numeric_static),
    )


def latent_factors(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(z_time, z_note)``; the shared leading coordinates correlate at ``shared_info``."""
    rho = cfg.shared_info
    z_time = rng.standard_normal(cfg.latent_time_dim)
    own = rng.standard_normal(cfg.latent_note_dim)
    z_note = own.copy()
    k = min(cfg.latent_time_dim, cfg.latent_note_dim)
    if rho == 1.0:
        z_note[:k] = z_time[:k]
    else:
        z_note[:k] = rho * z_time[:k] + math.sqrt(1.0 - rho * rho) * own[:k]
    return z_time, z_note


def _event_stream(cfg: SyntheticConfig, st: _Structure, z_time: np.ndarray, rng: np.random.Generator):
    n_events = max(1, int(rng.poisson(cfg.mean_seq_len)))
    start = 1_600_000_000.0 + rng.uniform(0.0, 30 * 86400.0)
    vids: list[int] = []
    times: list[float] = []
    t = start
    while len(vids) < n_events:
        # several variables recorded at one instant produce timestamp ties
        k = min(n_events - len(vids), 1 + int(rng.binomial(2, 0.35)), cfg.n_variables)
        chosen = rng.choice(cfg.n_variables, size=k, replace=False)
        vids.extend(int(v) for v in chosen)
        times.extend([t] * k)
        t += float(np.round(rng.lognormal(mean=4.0, sigma=1.0)))
    vids_a = np.array(vids, dtype=np.int64)
    times_a = np.array(times)
    span = max(times_a[-1] - times_a[0], 1.0)
    rel = (times_a - times_a[0]) / span - 0.5
    level = st.level_loading[vids_a] @ z_time
    trend = st.trend_loading[vids_a] @ z_time
    signal = level + trend * rel + cfg.event_noise * rng.standard_normal(len(vids_a))
    values = st.var_mean[vids_a] + st.var_scale[vids_a] * signal
    return vids_a, times_a, values


def _patient(cfg: SyntheticConfig, st: _Structure, index: int) -> CohortRecord:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, index)))
    z_time, z_note = latent_factors(cfg, rng)
    vids, times, values = _event_stream(cfg, st, z_time, rng)

    m = 1 + int(rng.binomial(cfg.max_note_chunks - 1, 0.5)) if cfg.max_note_chunks > 1 else 1
    chunks = (st.note_map @ z_note)[None, :] + cfg.note_noise * rng.standard_normal((m, cfg.embed_dim))
    both = np.concatenate([z_time, z_note])
    discharge = st.discharge_map @ both + cfg.discharge_noise * rng.standard_normal(cfg.embed_dim)

    scores = st.readout @ both
    labels = (scores > st.thresholds).astype(np.int64)
    flips = rng.random(cfg.n_outcomes) < cfg.label_noise
    labels = np.where(flips, 1 - labels, labels)

    numeric = st.static_loc + st.static_scale * rng.standard_normal(cfg.n_numeric_static)
    numeric[rng.random(cfg.n_numeric_static) < cfg.static_missing_rate] = np.nan
    onehot = np.zeros(cfg.n_categories)
    if cfg.n_categories:
        onehot[rng.integers(cfg.n_categories)] = 1.0
    static = np.concatenate([numeric, onehot])
    return CohortRecord(f"P{index:06d}", static, vids, times, values, chunks, discharge, labels)


def generate_synthetic_cohort(cfg: SyntheticConfig) -> list[CohortRecord]:
    """Deterministic synthetic cohort; patient ``i`` depends only on ``(seed, i)``."""
    st = _structure(cfg)
    return [_patient(cfg, st, i) for i in range(cfg.n_patients)]


def synthetic_latents(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Re-derive every patient's ``(z_time, z_note)`` pair, for diagnostics."""
    zt, zn = [], []
    for i in range(cfg.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, i)))
        a, b = latent_factors(cfg, rng)
        zt.append(a)
        zn.append(b)
    return np.array(zt), np.array(zn)


# ---------------------------------------------------------------------------
# discharge augmentation


DESCRIPTOR_STATS = 5


def event_descriptors(record: CohortRecord, n_variables: int) -> np.ndarray:
    """Per variable: log1p(count), min, max, last value, sign of the fitted slope."""
    feats = np.zeros((n_variables, DESCRIPTOR_STATS))
    for v in range(n_variables):
        sel = record.variable_ids == v
        if not sel.any():
            continue
        x = record.values[sel]
        t = record.timestamps[sel]
        slope = 0.0
        if len(np.unique(t)) > 1:
            tc = t - t.mean()
            slope = float(np.dot(tc, x - x.mean()) / np.dot(tc, tc))
        feats[v] = (math.log1p(len(x)), x.min(), x.max(), x[-1], np.sign(slope))
    return feats.reshape(-1)


@dataclass
class DescriptorAugmenter:
    """Content-only stand-in for text descriptions of a patient's vitals.

    Event statistics go through a fixed seeded random projection into the
    embedding space; the result is blended into the unit-normalised
    discharge embedding with weight ``lam`` and renormalised.
    """

    n_variables: int
    embed_dim: int
    lam: float = 0.25
    seed: int = 1234
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        n_in = self.n_variables * DESCRIPTOR_STATS
        self.projection = rng.standard_normal((self.embed_dim, n_in)) / np.sqrt(n_in)

    def descriptor(self, record: CohortRecord) -> np.ndarray:
        if record.n_events == 0:
            return np.zeros(self.embed_dim)
        d = self.projection @ event_descriptors(record, self.n_variables)
        n = np.linalg.norm(d)
        return d / n if n > 0 else d

    def __call__(self, record: CohortRecord) -> CohortRecord:
        base = record.discharge / np.linalg.norm(record.discharge)
        mixed = base + self.lam * self.descriptor(record)
        original = record.discharge_original if record.discharge_original is not None else record.discharge
        return record.replace(discharge=mixed / np.linalg.norm(mixed), discharge_original=original.copy())


def augment_discharge(record: CohortRecord, n_variables: int, lam: float = 0.25, seed: int = 1234) -> CohortRecord:
    return DescriptorAugmenter(n_variables, record.embed_dim, lam, seed)(record)
