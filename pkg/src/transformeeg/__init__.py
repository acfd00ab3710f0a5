"""TransformEEG: convolutional tokenizer plus transformer encoder for EEG-based Parkinson's detection."""

from .model import ModelConfig, build_model, count_params, model_forward, predict_proba
from .training import TrainConfig, fit
from .evaluation import nlnso_splits, metrics_report, optimize_threshold

__all__ = ["ModelConfig", "build_model", "count_params", "model_forward", "predict_proba",
           "TrainConfig", "fit", "nlnso_splits", "metrics_report", "optimize_threshold"]
