"""Multimodal EHR outcome prediction with sliding-window attention,
cross-modal fusion and contrastive alignment to discharge summaries,
built on a small numpy autodiff engine."""

from .cohort import CohortRecord, SyntheticConfig, generate_synthetic_cohort, load_cohort, save_cohort
from .config import TrainConfig, load_config, parse_config
from .experiment import run_experiment
from .metrics import EvalReport, auroc
from .training import evaluate, train

__all__ = [
    "CohortRecord",
    "EvalReport",
    "SyntheticConfig",
    "TrainConfig",
    "auroc",
    "evaluate",
    "generate_synthetic_cohort",
    "load_cohort",
    "load_config",
    "parse_config",
    "run_experiment",
    "save_cohort",
    "train",
]
__version__ = "0.1.0"
