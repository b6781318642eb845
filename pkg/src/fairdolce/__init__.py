"""Fairness-aware disentangled online learning for changing environments."""

from fairdolce.core import DataPoint, DualState, ModelParams, Task, TaskStream, build_task_stream, init_params
from fairdolce.learner import Ablation, LearnerConfig, Schedule, run_learner
from fairdolce.losses import FairnessMode

__all__ = [
    "Ablation",
    "DataPoint",
    "DualState",
    "FairnessMode",
    "LearnerConfig",
    "ModelParams",
    "Schedule",
    "Task",
    "TaskStream",
    "build_task_stream",
    "init_params",
    "run_learner",
]

__version__ = "0.1.0"
