"""EEG Parkinson's disease pipeline: augmentation, channel pruning, quality scoring and classification."""

from ._gepd import (
    DataError,
    QualityGateError,
    StageError,
    config,
    cosine_lr,
    format_config,
    js,
    kl,
    load_epochs,
    preprocess,
    run_experiment,
    stage_seed,
    sweep_delta,
    synth,
)

__all__ = [
    "DataError",
    "QualityGateError",
    "StageError",
    "config",
    "cosine_lr",
    "format_config",
    "js",
    "kl",
    "load_epochs",
    "preprocess",
    "run_experiment",
    "stage_seed",
    "sweep_delta",
    "synth",
]
__version__ = "0.1.0"
