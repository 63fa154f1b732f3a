"""Hierarchical attention temporal convolutional network for handgrip series.

Reverse-mode autodiff engine, the HA-TCN model and a plain TCN baseline,
receptive-field explanations, a relaxation-time baseline, data tools and a
cross-validation driver.
"""

from .autodiff import Tensor
from .data import Dataset, Series, SynthConfig, generate_synthetic, preprocess, subject_kfold
from .explain import explain_sample, receptive_field_start, relevance_frequency
from .model import HatcnConfig, HatcnModel, forward, load_checkpoint, save_checkpoint, tcn_forward
from .training import TrainConfig, cross_validate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Dataset", "Series", "SynthConfig", "generate_synthetic", "preprocess", "subject_kfold",
    "explain_sample", "receptive_field_start", "relevance_frequency", "HatcnConfig", "HatcnModel",
    "forward", "load_checkpoint", "save_checkpoint", "tcn_forward", "TrainConfig", "cross_validate",
    "evaluate", "train",
]
