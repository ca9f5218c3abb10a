"""Semantic change detection from bitemporal images and a historical map."""

from ._core import (
    ConfigError,
    DataError,
    NumericError,
    TransitionScheme,
    evaluate,
    gen_dataset,
    metric_report,
    poly_lr,
    predict,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "TransitionScheme",
    "evaluate",
    "gen_dataset",
    "metric_report",
    "poly_lr",
    "predict",
    "train",
]
