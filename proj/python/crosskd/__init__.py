"""Cross-architecture knowledge distillation from a ViT teacher to a CNN student."""

from ._crosskd import (
    ConfigError,
    DataError,
    Error,
    IoError,
    NumericError,
    attention,
    checkpoint_info,
    default_config,
    grad_suite,
    resolve_config,
    run_cli,
    synth_dataset,
    transferability,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "IoError",
    "NumericError",
    "attention",
    "checkpoint_info",
    "default_config",
    "grad_suite",
    "resolve_config",
    "run_cli",
    "synth_dataset",
    "transferability",
]
