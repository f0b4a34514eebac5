from .checkpoint_models import CheckpointHeader, TensorEntry, TrainingMeta
from .config_models import *
from .report_models import BenchRow, MetricsReport, NoiseStats, QualityRow, SimilarityTrace

__all__ = [
    "RunConfig",
    "UNetConfig",
    "ScheduleConfig",
    "ToySpec",
    "TeacherTrainConfig",
    "DistillConfig",
    "SamplerConfig",
    "ScheduleKind",
    "Spacing",
    "WeightKind",
    "SampleMode",
    "EmbeddingKind",
    "CheckpointHeader",
    "TensorEntry",
    "TrainingMeta",
    "MetricsReport",
    "NoiseStats",
    "SimilarityTrace",
    "QualityRow",
    "BenchRow",
]
