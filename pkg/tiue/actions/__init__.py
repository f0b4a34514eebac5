from .analyze import AnalyzeAction
from .bench import BenchAction
from .distill import DistillAction
from .evaluate import EvaluateAction
from .export_data import ExportDataAction
from .sample import SampleAction
from .train_teacher import TrainTeacherAction

__all__ = [
    "TrainTeacherAction",
    "DistillAction",
    "SampleAction",
    "AnalyzeAction",
    "EvaluateAction",
    "BenchAction",
    "ExportDataAction",
]
