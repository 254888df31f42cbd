"""Sparse adversarial perturbations from a generator with decoupled magnitude and location."""

from .generator import GeneratorConfig, SparseGenerator, build_generator
from .quantize import apply_perturbation, hard_quantize, random_quantize, ste_quantize
from .trainer import AttackConfig, TrainConfig, train_generator

__all__ = [
    "AttackConfig",
    "GeneratorConfig",
    "SparseGenerator",
    "TrainConfig",
    "apply_perturbation",
    "build_generator",
    "hard_quantize",
    "random_quantize",
    "ste_quantize",
    "train_generator",
]
__version__ = "0.1.0"
