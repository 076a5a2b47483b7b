"""Transformer-based ECG beat classification with int8 integer-only inference."""

from .model import ModelConfig, ModelParams, count_ops_and_memory, count_params, forward, init_params

__all__ = ["ModelConfig", "ModelParams", "count_ops_and_memory", "count_params", "forward",
           "init_params"]
__version__ = "0.1.0"
