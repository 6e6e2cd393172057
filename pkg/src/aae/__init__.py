"""Assisted excitation of U-Net feature maps for salient object detection."""

from .autodiff import Tape, Tensor, backward, grad_check
from .curriculum import CurriculumSchedule, alpha_at
from .excitation import ExcitationConfig, assisted_excitation
from .metrics import MetricsRecord, evaluate_dataset
from .network import NetworkSpec, UNet, build_unet, count_params

__all__ = [
    "CurriculumSchedule",
    "ExcitationConfig",
    "MetricsRecord",
    "NetworkSpec",
    "Tape",
    "Tensor",
    "UNet",
    "alpha_at",
    "assisted_excitation",
    "backward",
    "build_unet",
    "count_params",
    "evaluate_dataset",
    "grad_check",
]

__version__ = "0.1.0"
