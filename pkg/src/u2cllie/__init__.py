"""Entropy-guided dual-domain U-net for low-light enhancement, numpy only."""

from .engine import ComplexTensor, Params, Tape, Tensor, fd_gradient
from .network import (ModelConfig, TrainerConfig, build_model, forward,
                      load_checkpoint, save_checkpoint, toy_config, train_toy)

__version__ = "0.1.0"

__all__ = [
    "ComplexTensor", "ModelConfig", "Params", "Tape", "Tensor",
    "TrainerConfig", "build_model", "fd_gradient", "forward",
    "load_checkpoint", "save_checkpoint", "toy_config", "train_toy",
    "__version__",
]
