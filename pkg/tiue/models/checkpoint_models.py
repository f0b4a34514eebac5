from typing import Any, Dict, List

from pydantic import BaseModel, ConfigDict, Field, model_validator

SUPPORTED_DTYPES = ("float32", "float64")


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    dtype: str
    shape: List[int]
    byte_offset: int = Field(ge=0)
    byte_len: int = Field(ge=0)

    @model_validator(mode="after")
    def check_entry(self) -> "TensorEntry":
        assert self.dtype in SUPPORTED_DTYPES, f"unsupported dtype {self.dtype}"
        assert all(s >= 0 for s in self.shape), f"negative extent in {self.shape}"
        count = 1
        for s in self.shape:
            count *= s
        itemsize = 4 if self.dtype == "float32" else 8
        assert self.byte_len == count * itemsize, f"{self.name}: byte_len {self.byte_len} does not match shape"
        return self


class TrainingMeta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str = "teacher"  # teacher | student
    iterations: int = 0
    config_hash: str | None = None
    ema: bool = True
    run_id: str | None = None
    lora_rank: int | None = None
    lora_alpha: float | None = None


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    unet_config: Dict[str, Any] = Field(alias="model_config")
    schedule_params: Dict[str, Any]
    sampler_plan: Dict[str, Any] | None = None
    tensors: List[TensorEntry]
    training_meta: TrainingMeta = Field(default_factory=TrainingMeta)

    @model_validator(mode="after")
    def check_layout(self) -> "CheckpointHeader":
        offset = 0
        names = set()
        for entry in self.tensors:
            assert entry.name not in names, f"duplicate tensor {entry.name}"
            names.add(entry.name)
            assert entry.byte_offset == offset, \
                f"tensor {entry.name} starts at {entry.byte_offset}, expected {offset}"
            offset += entry.byte_len
        return self

    @property
    def payload_bytes(self) -> int:
        return sum(e.byte_len for e in self.tensors)
