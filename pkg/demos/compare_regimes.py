"""Compare loss regimes across seeds and check the expected orderings.

This is a scaled-down version of the full protocol in the acceptance
suite (6 regimes, 5 seeds, 2000 patients, 30 epochs). Run:
    python3 demos/compare_regimes.py
"""

from ehrcontrast import SyntheticConfig, TrainConfig, run_experiment

result = run_experiment(
    ["ce", "ce+global", "intermodal", "global"],
    n_seeds=2,
    cohort_cfg=SyntheticConfig(n_patients=600, mean_seq_len=32, shared_info=0.1),
    train_cfg=TrainConfig(epochs=8, lr=1e-3),
)
print(result.format())
paths = result.write("demo_regimes")
print(f"tables in {paths['table']}")
