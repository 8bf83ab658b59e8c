from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import (
    Architecture,
    CnnModel,
    TrainConfig,
    build_model,
    extract_features,
    forward,
    loss_and_grads,
    make_architecture,
    reinit_head,
    train_step,
)

__all__ = [
    "Architecture",
    "Checkpoint",
    "CnnModel",
    "TrainConfig",
    "build_model",
    "extract_features",
    "forward",
    "load_checkpoint",
    "loss_and_grads",
    "make_architecture",
    "reinit_head",
    "save_checkpoint",
    "train_step",
]
