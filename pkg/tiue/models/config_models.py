from enum import Enum
from typing import List

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

__all__ = [
    "ScheduleKind", "Spacing", "WeightKind", "SampleMode", "EmbeddingKind",
    "UNetConfig", "ScheduleConfig", "ToySpec", "TeacherTrainConfig", "DistillConfig", "SamplerConfig",
    "RunConfig",
]


def _lookup(cls, value):
    if not isinstance(value, str):
        return None
    value = value.lower().replace("_", "-")
    for member in cls:
        if member.value == value:
            return member
    return None


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    SCALED_LINEAR = "scaled-linear"

    @classmethod
    def _missing_(cls, value):
        return _lookup(cls, value)


class Spacing(str, Enum):
    TRAILING = "trailing"
    LEADING = "leading"

    @classmethod
    def _missing_(cls, value):
        return _lookup(cls, value)


class WeightKind(str, Enum):
    """Time weighting w(t) of the distillation gradient."""
    SIGMA2 = "sigma2"
    CONSTANT = "constant"

    @classmethod
    def _missing_(cls, value):
        return _lookup(cls, value)


class SampleMode(str, Enum):
    DDIM = "ddim"
    LOOPFREE_SEQ = "loopfree-seq"
    LOOPFREE_PAR = "loopfree-par"

    @classmethod
    def _missing_(cls, value):
        return _lookup(cls, value)


class EmbeddingKind(str, Enum):
    FLAT_PIXELS = "flat-pixels"
    POOLED = "pooled"
    TEACHER_ENCODER = "teacher-encoder"

    @classmethod
    def _missing_(cls, value):
        if value in ("pixels", "flat"):
            return cls.FLAT_PIXELS
        return _lookup(cls, value)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class UNetConfig(StrictModel):
    image_size: int = 24
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 32
    channel_mult: List[int] = Field(default_factory=lambda: [1, 2, 4])
    num_res_blocks: int = 2
    time_embed_dim: int = 128
    cond_dim: int = 16
    groups: int = 8

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @model_validator(mode="after")
    def check_shapes(self) -> "UNetConfig":
        assert self.image_size > 0 and self.in_channels > 0 and self.out_channels > 0, \
            "image size and channel counts must be positive"
        assert len(self.channel_mult) >= 1 and all(m >= 1 for m in self.channel_mult), \
            f"invalid channel multipliers {self.channel_mult}"
        assert self.num_res_blocks >= 1, "need at least one resblock per level"
        assert self.image_size % (2 ** (self.levels - 1)) == 0, \
            f"image_size {self.image_size} not divisible by 2^{self.levels - 1}"
        assert self.groups >= 1 and all(c % self.groups == 0 for c in self.level_channels), \
            f"channel counts {self.level_channels} not divisible by {self.groups} groups"
        assert self.base_channels % 2 == 0, "base_channels must be even for the sinusoidal embedding"
        assert self.time_embed_dim > 0 and self.cond_dim > 0
        return self


class ScheduleConfig(StrictModel):
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    kind: ScheduleKind = ScheduleKind.SCALED_LINEAR
    spacing: Spacing = Spacing.TRAILING

    @model_validator(mode="after")
    def check_range(self) -> "ScheduleConfig":
        assert self.T >= 1, f"T must be at least 1, got {self.T}"
        assert 0 < self.beta_start <= self.beta_end < 1, \
            f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
        return self


class ToySpec(StrictModel):
    image_size: int = 24
    position_jitter: float = 0.15  # fraction of the canvas
    size_range: List[float] = Field(default_factory=lambda: [0.45, 0.7])  # shape extent, fraction of the canvas
    background: float = -1.0
    supersample: int = 4

    @model_validator(mode="after")
    def check_spec(self) -> "ToySpec":
        assert self.image_size >= 8, f"image_size {self.image_size} too small to draw shapes"
        assert len(self.size_range) == 2 and 0 < self.size_range[0] <= self.size_range[1] <= 0.9, \
            f"invalid size range {self.size_range}"
        assert 0 <= self.position_jitter and self.size_range[1] + 2 * self.position_jitter <= 1.0, \
            "shapes could leave the canvas with this jitter and size"
        assert -1.0 <= self.background <= 1.0
        assert self.supersample >= 1
        return self


class TeacherTrainConfig(StrictModel):
    lr: float = 2e-4
    batch: int = 32
    iterations: int = 6000
    ema_decay: float = 0.999
    cond_drop_prob: float = 0.1
    dataset_size: int = 12_000
    seed: int = 0
    log_every: int = 50

    @model_validator(mode="after")
    def check_values(self) -> "TeacherTrainConfig":
        assert self.lr > 0 and self.batch >= 1 and self.iterations >= 0 and self.dataset_size >= 1
        assert 0 <= self.ema_decay <= 1, f"ema_decay {self.ema_decay} outside [0, 1]"
        assert 0 <= self.cond_drop_prob <= 1, f"cond_drop_prob {self.cond_drop_prob} outside [0, 1]"
        assert self.log_every >= 1
        return self


class DistillConfig(StrictModel):
    lr_student: float = 1e-6
    lr_lora: float = 1e-3
    guidance_scale: float = 4.5
    K: int = 4
    kl_weight: float = 0.1
    w_kind: WeightKind = WeightKind.SIGMA2
    ema_decay: float = 0.999
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    lora_rank: int = 64
    lora_alpha: float = 108.0
    batch: int = 8
    iterations: int = 20_000
    seed: int = 0
    log_every: int = 50
    check_namespaces: bool = False

    @model_validator(mode="after")
    def check_values(self) -> "DistillConfig":
        assert 0 <= self.t_min_frac < self.t_max_frac <= 1, \
            f"need 0 <= t_min_frac < t_max_frac <= 1, got {self.t_min_frac}, {self.t_max_frac}"
        assert self.guidance_scale >= 0, f"guidance_scale must be >= 0, got {self.guidance_scale}"
        assert self.lr_student > 0 and self.lr_lora > 0
        assert self.K >= 1, f"K must be at least 1, got {self.K}"
        assert self.kl_weight >= 0
        assert 0 <= self.ema_decay <= 1
        assert self.lora_rank >= 1 and self.lora_alpha > 0
        assert self.batch >= 1 and self.iterations >= 0 and self.log_every >= 1
        return self


class SamplerConfig(StrictModel):
    K: int = 4
    thread_count: int | None = None
    guidance_scale: float = 1.0

    @field_validator("guidance_scale")
    @classmethod
    def check_guidance(cls, value: float) -> float:
        assert value >= 0, f"guidance_scale must be >= 0, got {value}"
        return value

    @field_validator("thread_count")
    @classmethod
    def check_threads(cls, value: int | None) -> int | None:
        assert value is None or value >= 1, f"thread_count must be >= 1, got {value}"
        return value


class RunConfig(StrictModel):
    model: UNetConfig = Field(default_factory=UNetConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    data: ToySpec = Field(default_factory=ToySpec)
    teacher: TeacherTrainConfig = Field(default_factory=TeacherTrainConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    debug: bool = False

    @model_validator(mode="after")
    def check_cross_sections(self) -> "RunConfig":
        assert self.data.image_size == self.model.image_size, \
            f"data.image_size {self.data.image_size} differs from model.image_size {self.model.image_size}"
        assert self.model.in_channels == 3 and self.model.out_channels == 3, "toy images are RGB"
        assert self.model.cond_dim >= 12, "cond_dim must hold 12 orthonormal class embeddings"
        assert self.distill.K <= self.schedule.T, f"distill.K {self.distill.K} exceeds T {self.schedule.T}"
        assert self.sampler.K <= self.schedule.T, f"sampler.K {self.sampler.K} exceeds T {self.schedule.T}"
        return self
