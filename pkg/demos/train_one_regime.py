"""Train the multimodal model with cross-entropy plus the discharge-summary contrast.

A reduced cohort and model keep this under a minute. Run:
    python3 demos/train_one_regime.py
"""

import logging

from ehrcontrast import SyntheticConfig, TrainConfig, evaluate, generate_synthetic_cohort, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

cohort = generate_synthetic_cohort(SyntheticConfig(n_patients=800, mean_seq_len=32, seed=0))
cfg = TrainConfig(loss_regime="ce+global", epochs=12, lr=1e-3)
fit = train(cfg, cohort)

for row in fit.history:
    print(f"epoch {row['epoch']}: total {row['L_total']:.3f}  alignment {row['L_alignment']:.3f}  "
          f"ce {row['L_ce']:.3f}  val AUROC {row['val_mean_auroc']:.3f}")

report = evaluate(fit.best, cohort, "test")
print(f"best checkpoint from epoch {fit.best.epoch}; test AUROC per outcome "
      f"{[round(a, 3) for a in report.per_outcome]}, mean {report.mean:.3f}")
