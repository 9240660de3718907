"""Mutual-guided dynamic network for multi-input image fusion, on a small numpy autodiff engine."""
from .config import ModelConfig, TASKS
from .model import init_params, mgdn_forward, compute_loss, parameter_count
from .train import OptimConfig, TrainState, train, train_step

__all__ = ["ModelConfig", "TASKS", "OptimConfig", "TrainState", "compute_loss", "init_params",
           "mgdn_forward", "parameter_count", "train", "train_step"]
__version__ = "0.1.0"
