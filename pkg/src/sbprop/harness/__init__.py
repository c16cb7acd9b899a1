"""Experiment harness: synthetic data, training runs, comparisons, CLI."""

from .data import SyntheticDataset, gen_synthetic_dataset, nearest_motif_oracle_accuracy
from .experiment import ExperimentConfig, RunRecord, compare_runs, run_experiment

__all__ = [
    "SyntheticDataset",
    "gen_synthetic_dataset",
    "nearest_motif_oracle_accuracy",
    "ExperimentConfig",
    "RunRecord",
    "run_experiment",
    "compare_runs",
]
