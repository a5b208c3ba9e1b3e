"""Numpy fully convolutional encoder-decoder with segmentation and box heads."""

from .model import (
    LossBreakdown,
    NetworkConfig,
    NetworkError,
    NetworkOutput,
    backward,
    forward,
    init_params,
    loss,
    param_shapes,
    predict,
)
from .train import (
    EpochLog,
    NumericalError,
    Sample,
    TrainConfig,
    TrainResult,
    class_weights,
    evaluate_loss,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
    write_log,
)

__all__ = [
    "LossBreakdown",
    "NetworkConfig",
    "NetworkError",
    "NetworkOutput",
    "backward",
    "forward",
    "init_params",
    "loss",
    "param_shapes",
    "predict",
    "EpochLog",
    "NumericalError",
    "Sample",
    "TrainConfig",
    "TrainResult",
    "class_weights",
    "evaluate_loss",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "train",
    "write_log",
]
