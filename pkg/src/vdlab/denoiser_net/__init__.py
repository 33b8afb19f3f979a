"""Video denoiser network with hand-written gradients."""

from .check import GradCheckReport, finite_difference_check
from .checkpoint import load_checkpoint, save_checkpoint
from .model import DenoiserModel, ModelConfig, init_from_image_model, is_temporal_param
from .optim import OptimizerConfig, OptimizerState, init_optimizer, optimizer_step

__all__ = [
    "DenoiserModel",
    "GradCheckReport",
    "ModelConfig",
    "OptimizerConfig",
    "OptimizerState",
    "finite_difference_check",
    "init_from_image_model",
    "init_optimizer",
    "is_temporal_param",
    "load_checkpoint",
    "optimizer_step",
    "save_checkpoint",
]
