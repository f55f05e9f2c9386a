from .network import (
    CLASSES,
    PROFILES,
    NetworkConfig,
    NetworkParams,
    alexnet_profile,
    desk_profile,
    forward,
    init_network,
    loss_and_gradients,
    softmax,
    zero_network,
)
from .serialize import load_model, save_model
from .training import EpochMetrics, TrainConfig, TrainResult, fit, predict_batch, predict_tile, sgd_step, train

__all__ = [
    "CLASSES", "PROFILES", "NetworkConfig", "NetworkParams", "alexnet_profile", "desk_profile",
    "forward", "init_network", "loss_and_gradients", "softmax", "zero_network",
    "load_model", "save_model",
    "EpochMetrics", "TrainConfig", "TrainResult", "fit", "predict_batch", "predict_tile", "sgd_step", "train",
]
