"""Multi-dataset, multi-domain, multi-task training on a small autodiff engine."""

from ._kernels import BACKEND
from .data import SuiteConfig, generate_synthetic_suite, load_dataset, save_dataset
from .experiment import ExperimentConfig, run_ablation_grid, run_variant
from .model import ModelConfig, init_model, load_model
from .trainer import VARIANTS, RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ExperimentConfig", "ModelConfig", "RunReport", "SuiteConfig", "TrainConfig",
    "VARIANTS", "evaluate", "generate_synthetic_suite", "init_model", "load_dataset",
    "load_model", "run_ablation_grid", "run_variant", "save_dataset", "train",
]
