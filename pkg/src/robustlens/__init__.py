"""Adversarial training, L-inf attacks and gradient saliency on a numpy autodiff tape."""

from .attacks import PerturbationBudget, fgsm, is_adversarial, pgd, project_linf
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import LabeledDataset, load_dataset, make_texture_shapes
from .fusion import FusionModel, build_fusion, finetune_fusion
from .nn import ModelSpec, ModelState, classify, init_state, small_convnet_spec
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FusionModel",
    "LabeledDataset",
    "ModelSpec",
    "ModelState",
    "PerturbationBudget",
    "TrainConfig",
    "build_fusion",
    "classify",
    "fgsm",
    "finetune_fusion",
    "init_state",
    "is_adversarial",
    "load_checkpoint",
    "load_dataset",
    "make_texture_shapes",
    "pgd",
    "project_linf",
    "save_checkpoint",
    "small_convnet_spec",
    "train",
]
