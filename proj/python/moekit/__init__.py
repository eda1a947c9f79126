"""Sparse mixture-of-experts layer mechanics, staged tuning, and routing analytics."""

from moekit._moekit import (
    ConfigError,
    NumericError,
    ShapeError,
    balance_loss,
    capacity_kept,
    cosine_lr,
    count_parameters,
    gelu,
    layer_norm,
    pca_first_component,
    route_top_k,
    softmax,
    toy_logits,
    __version__,
)

__all__ = [
    "ConfigError",
    "NumericError",
    "ShapeError",
    "balance_loss",
    "capacity_kept",
    "cosine_lr",
    "count_parameters",
    "gelu",
    "layer_norm",
    "pca_first_component",
    "route_top_k",
    "softmax",
    "toy_logits",
    "__version__",
]
