"""Python bindings for the akd distillation library."""

from ._akd import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    Error,
    LoadError,
    ShapeError,
    adaptive_temperature,
    contribution_weights,
    corpus_bleu,
    export_trace,
    gen_data,
    lambda2_schedule,
    load_config,
    model_info,
    run_pipeline,
    smooth_weights,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "Error",
    "LoadError",
    "ShapeError",
    "adaptive_temperature",
    "contribution_weights",
    "corpus_bleu",
    "export_trace",
    "gen_data",
    "lambda2_schedule",
    "load_config",
    "model_info",
    "run_pipeline",
    "smooth_weights",
]
