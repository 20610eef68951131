"""Loss-regime comparison over several seeds on one synthetic cohort."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import CohortRecord, SyntheticConfig, generate_synthetic_cohort
from .config import REGIMES, TrainConfig
from .metrics import EvalReport
from .training import evaluate, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Claim:
    """Expected ordering ``mean(better) > mean(worse) - tolerance`` (strict) or ``>=``."""

    better: str
    worse: str
    tolerance: float = 0.0
    strict: bool = False

    def holds(self, a: float, b: float) -> bool:
        lhs, rhs = a, b - self.tolerance
        return bool(lhs > rhs) if self.strict else bool(lhs >= rhs)

    @property
    def relation(self) -> str:
        return ">" if self.strict else ">="


CLAIMS = (
    Claim("global", "intermodal", strict=True),
    Claim("ce+global", "ce"),
    Claim("ce", "ce+intermodal", tolerance=0.01),
    Claim("ce+global-augmented", "ce+global", tolerance=0.01),
)


@dataclass
class Verdict:
    first: str
    second: str
    mean_first: float
    mean_second: float
    relation: str
    holds: bool | None
    tolerance: float = 0.0

    @property
    def text(self) -> str:
        status = "n/a" if self.holds is None else ("holds" if self.holds else "VIOLATED")
        slack = f" - {self.tolerance:g}" if self.tolerance else ""
        return (f"{self.first} ({self.mean_first:.4f}) {self.relation} {self.second} "
                f"({self.mean_second:.4f}){slack}: {status}")


@dataclass
class RunRecord:
    regime: str
    seed: int
    report: EvalReport
    seconds: float


@dataclass
class ExperimentResult:
    regimes: list[str]
    runs: list[RunRecord] = field(default_factory=list)

    def means(self, regime: str) -> np.ndarray:
        return np.array([r.report.mean for r in self.runs if r.regime == regime])

    def summary(self) -> dict[str, tuple[float, float, int]]:
        """Per-regime (mean, sample std, number of seeds) of the test mean AUROC."""
        out = {}
        for regime in self.regimes:
            m = self.means(regime)
            std = float(np.std(m, ddof=1)) if len(m) > 1 else 0.0
            out[regime] = (float(np.mean(m)), std, len(m))
        return out

    def verdicts(self) -> list[Verdict]:
        if len(self.regimes) < 2:
            return []
        summ = self.summary()
        claims = {(c.better, c.worse): c for c in CLAIMS}
        verdicts = []
        for a, b in itertools.combinations(self.regimes, 2):
            claim = claims.get((a, b)) or claims.get((b, a))
            if claim is not None:
                ma, mb = summ[claim.better][0], summ[claim.worse][0]
                verdicts.append(Verdict(claim.better, claim.worse, ma, mb, claim.relation, claim.holds(ma, mb),
                                        claim.tolerance))
            else:
                ma, mb = summ[a][0], summ[b][0]
                rel = ">" if ma > mb else ("<" if ma < mb else "=")
                verdicts.append(Verdict(a, b, ma, mb, rel, None))
        return verdicts

    def table_rows(self) -> list[dict]:
        """One row per (regime, seed), then ``mean`` and ``std`` rows per regime."""
        n_out = max((len(r.report.per_outcome) for r in self.runs), default=0)
        rows = []
        for run in self.runs:
            row = {"regime": run.regime, "seed": run.seed, "mean_auroc": run.report.mean}
            row.update({f"auroc_{o}": run.report.per_outcome[o] for o in range(n_out)})
            row["seconds"] = run.seconds
            rows.append(row)
        for regime, (mean, std, n) in self.summary().items():
            per = np.array([r.report.per_outcome for r in self.runs if r.regime == regime], dtype=float)
            for label, agg in (("mean", mean), ("std", std)):
                row = {"regime": regime, "seed": label, "mean_auroc": agg}
                for o in range(n_out):
                    col = per[:, o]
                    row[f"auroc_{o}"] = float(np.mean(col)) if label == "mean" else (
                        float(np.std(col, ddof=1)) if n > 1 else 0.0)
                row["seconds"] = ""
                rows.append(row)
        return rows

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"table": out / "results.csv", "verdicts": out / "verdicts.csv"}
        rows = self.table_rows()
        with paths["table"].open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["regime", "seed", "mean_auroc"])
            writer.writeheader()
            writer.writerows(rows)
        with paths["verdicts"].open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["first", "second", "mean_first", "mean_second", "relation", "tolerance", "holds"])
            for v in self.verdicts():
                writer.writerow([v.first, v.second, v.mean_first, v.mean_second, v.relation, v.tolerance,
                                 "" if v.holds is None else v.holds])
        return paths

    def format(self) -> str:
        lines = ["regime                 mean     std      seeds"]
        for regime, (mean, std, n) in self.summary().items():
            lines.append(f"{regime:<22} {mean:.4f}   {std:.4f}   {n}")
        for v in self.verdicts():
            lines.append(v.text)
        return "\n".join(lines)


def run_experiment(regimes, n_seeds: int, cohort_cfg: SyntheticConfig | None = None,
                   train_cfg: TrainConfig | None = None,
                   cohort: list[CohortRecord] | None = None) -> ExperimentResult:
    """Train and test-evaluate every regime under seeds ``0..n_seeds-1``.

    All runs share one cohort; the seed drives the split, initialisation,
    shuffling and dropout.
    """
    regimes = list(regimes)
    if not regimes:
        raise ValueError("at least one regime is required")
    unknown = [r for r in regimes if r not in REGIMES]
    if unknown:
        raise ValueError(f"unknown regimes {unknown}; choose from {REGIMES}")
    if len(set(regimes)) != len(regimes):
        raise ValueError("regimes must be distinct")
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    base = train_cfg or TrainConfig()
    if cohort is None:
        cohort = generate_synthetic_cohort(cohort_cfg or SyntheticConfig())
    result = ExperimentResult(regimes)
    for regime in regimes:
        for seed in range(n_seeds):
            cfg = base.replace(loss_regime=regime, seed=seed)
            start = time.perf_counter()
            fit = train(cfg, cohort)
            report = evaluate(fit.best, cohort, "test")
            elapsed = time.perf_counter() - start
            log.info("%s seed %d test mean AUROC %.4f (%.1fs)", regime, seed, report.mean, elapsed)
            result.runs.append(RunRecord(regime, seed, report, elapsed))
    return result
