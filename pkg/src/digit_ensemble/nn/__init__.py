from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .model import (
    LayerSpec,
    Mode,
    ModelSpec,
    Network,
    build_table1_cnn,
    cross_entropy_loss,
    forward,
    one_hot,
)
from .train import TrainConfig, TrainHistory, evaluate_accuracy, fit, train

__all__ = [
    "LayerSpec", "Mode", "ModelSpec", "Network", "build_table1_cnn", "cross_entropy_loss",
    "forward", "one_hot", "ModelCheckpoint", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "TrainHistory", "evaluate_accuracy", "fit", "train",
]
