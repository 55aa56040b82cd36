"""Multi-scale bandpass CNN for image demoireing on a small numpy autodiff core."""

from .autodiff import Tape, Tensor, backward, grad_check
from .net import ArchConfig, Model, ablate, build, forward, param_count, predict, self_ensemble

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "Model",
    "Tape",
    "Tensor",
    "ablate",
    "backward",
    "build",
    "forward",
    "grad_check",
    "param_count",
    "predict",
    "self_ensemble",
]
