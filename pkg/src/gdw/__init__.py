"""Class-level gradient reweighting on a small numpy autodiff engine."""

from .classweights import ClassWeightMatrix, clone_weights, second_stage_weights, zero_mean_project
from .engine import MODES, RunRecord, Trainer, TrainerConfig, train_gdw
from .experiment import ExperimentConfig, preset, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ClassWeightMatrix", "clone_weights", "second_stage_weights", "zero_mean_project",
    "MODES", "RunRecord", "Trainer", "TrainerConfig", "train_gdw",
    "ExperimentConfig", "preset", "run_experiment",
]
