"""Frozen-backbone prompt tuning for text-conditioned segmentation."""

from .backbone import Backbone, BackboneConfig, tokenize
from .prompts import CouplerConfig, PromptState, init_prompts, trainable_parameters
from .tensor import Tensor
from .training import LossConfig, TrainRunConfig, dice_score, train

__all__ = [
    "Backbone",
    "BackboneConfig",
    "CouplerConfig",
    "LossConfig",
    "PromptState",
    "Tensor",
    "TrainRunConfig",
    "dice_score",
    "init_prompts",
    "tokenize",
    "train",
    "trainable_parameters",
]
