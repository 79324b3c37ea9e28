"""Small reverse-mode network toolkit: layers, Adam, gradient checks, checkpoints."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, check_module, grad_check
from .kernels import BACKEND
from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    Linear,
    MaxPool2d,
    Module,
    Parameter,
    ReLU,
    Sequential,
    softmax,
    softmax_cross_entropy,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "BACKEND",
    "Adam",
    "AdamState",
    "AdaptiveAvgPool2d",
    "BatchNorm2d",
    "CheckpointError",
    "Conv2d",
    "Dropout",
    "Flatten",
    "GradCheckReport",
    "Linear",
    "MaxPool2d",
    "Module",
    "Parameter",
    "ReLU",
    "Sequential",
    "adam_step",
    "check_module",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
    "softmax",
    "softmax_cross_entropy",
]
