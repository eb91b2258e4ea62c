"""Experiment harness: configuration, sweeps, exports and the CLI."""
from .config import ExperimentConfig, resolve_datasets, resolve_pool
from .sweep import aggregate, run_sweep, sweep_cells

__all__ = ["ExperimentConfig", "aggregate", "resolve_datasets", "resolve_pool", "run_sweep", "sweep_cells"]
