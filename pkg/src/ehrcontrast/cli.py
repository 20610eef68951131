"""Command-line entry point: ``ehrcontrast <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .cohort import SyntheticConfig, cohort_counts, generate_synthetic_cohort, load_cohort, save_cohort
from .config import COHORT_PREFIX, ConfigError, build, load_config, parse_experiment_config, parse_pairs
from .experiment import run_experiment
from .metrics import EvalReport
from .tokenizer import tokenize
from .training import evaluate, train

log = logging.getLogger("ehrcontrast")


def _synthetic_config(path) -> SyntheticConfig:
    pairs = parse_pairs(Path(path).read_text(encoding="utf-8"))
    pairs = [(n, k[len(COHORT_PREFIX):] if k.startswith(COHORT_PREFIX) else k, v) for n, k, v in pairs]
    return build(SyntheticConfig, pairs)


def _report_csv(report: EvalReport, out) -> None:
    row = report.as_row()
    row.update({f"positives_{o}": p for o, p in enumerate(report.positives)})
    writer = csv.DictWriter(out, fieldnames=list(row))
    writer.writeheader()
    writer.writerow(row)


def cmd_generate(args) -> int:
    cfg = _synthetic_config(args.config)
    records = generate_synthetic_cohort(cfg)
    save_cohort(records, args.out)
    counts = cohort_counts(records)
    print(f"wrote {counts['records']} records ({counts['events']} events) to {args.out}")
    return 0


def cmd_tokenize(args) -> int:
    records = {r.patient_id: r for r in load_cohort(args.cohort)}
    if args.record not in records:
        print(f"error: no record with patient_id {args.record!r}", file=sys.stderr)
        return 2
    rec = records[args.record]
    n_global = args.n_global if args.n_global is not None else len(rec.labels)
    sys.stdout.write(tokenize(rec, n_global, args.max_len).to_text())
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cohort = load_cohort(args.cohort)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, cohort)
    result.best.save(out / "best.ckpt")
    if result.history:
        with (out / "history.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(result.history[0]))
            writer.writeheader()
            writer.writerows(result.history)
    if result.best_val is not None:
        with (out / "val_report.csv").open("w", newline="", encoding="utf-8") as fh:
            _report_csv(result.best_val, fh)
        print(f"best validation mean AUROC {result.best_val.mean:.4f} at epoch {result.best.epoch}")
    print(f"checkpoint written to {out / 'best.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    report = evaluate(ckpt, load_cohort(args.cohort), args.split)
    _report_csv(report, sys.stdout)
    return 0


def cmd_experiment(args) -> int:
    train_cfg, cohort_cfg = parse_experiment_config(Path(args.config).read_text(encoding="utf-8"))
    regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
    result = run_experiment(regimes, args.seeds, cohort_cfg, train_cfg)
    paths = result.write(args.out)
    print(result.format())
    print(f"tables written to {paths['table']} and {paths['verdicts']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrcontrast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("tokenize", help="print the token sequence of one record")
    p.add_argument("--cohort", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--n-global", type=int, default=None, help="global tokens (default: number of outcomes)")
    p.add_argument("--max-len", type=int, default=512)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train one model and save the best checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="compare loss regimes over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--regimes", required=True, help="comma-separated regime names")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
