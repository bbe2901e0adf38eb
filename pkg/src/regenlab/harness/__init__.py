from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .dataset import generate_dataset, synthetic_prior
from .experiment import (
    ReportTable,
    TrialRecord,
    prepare,
    run_experiment,
    run_sweep,
    tune_eta,
)
from .fit import fit_prior

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ReportTable",
    "TrialRecord",
    "fit_prior",
    "generate_dataset",
    "load_config",
    "parse_config",
    "prepare",
    "run_experiment",
    "run_sweep",
    "synthetic_prior",
    "tune_eta",
]
