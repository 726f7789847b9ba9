"""Numpy convolutional encoder-decoder with masked kernels."""

from .model import (
    DEFAULT_LAYERS,
    ConvLayer,
    ConvModel,
    build_model,
    count_params,
    forward_raw,
    loss,
    loss_and_gradients,
    predict_scaled,
)
from .optim import AdamState, adam_init, adam_project_step
from .serialize import CheckpointError, load_model, save_model

__all__ = [
    "DEFAULT_LAYERS", "ConvLayer", "ConvModel", "build_model", "count_params", "forward_raw",
    "loss", "loss_and_gradients", "predict_scaled", "AdamState", "adam_init",
    "adam_project_step", "CheckpointError", "load_model", "save_model",
]
