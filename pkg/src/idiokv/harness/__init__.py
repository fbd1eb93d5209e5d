"""Synthetic workloads, evaluation and ablations."""

from .ablation import AblationReport, run_head_count_ablation, run_masking_ablation
from .evaluation import EvalReport, run_eval
from .planting import build_planted_model
from .tasks import NeedleTask, TaskParams, generate_needle_task, generate_tasks
from .traces import PlantedTrace, generate_planted_trace

__all__ = [
    "AblationReport",
    "EvalReport",
    "NeedleTask",
    "PlantedTrace",
    "TaskParams",
    "build_planted_model",
    "generate_needle_task",
    "generate_planted_trace",
    "generate_tasks",
    "run_eval",
    "run_head_count_ablation",
    "run_masking_ablation",
]
