"""Smooth pseudo-labeling for semi-supervised classification on synthetic data."""

from .diffcore import InputError, ModelParams, OptimState, Tape, TrainingFault, sg
from .losses import LossConfig, Variant

__all__ = [
    "InputError",
    "LossConfig",
    "ModelParams",
    "OptimState",
    "Tape",
    "TrainingFault",
    "Variant",
    "sg",
]
__version__ = "0.1.0"
