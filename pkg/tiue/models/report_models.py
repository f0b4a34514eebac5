from typing import Dict, List

from pydantic import BaseModel, Field, model_validator


class NoiseStats(BaseModel):
    mean: float
    var: float
    excess_kurtosis: float
    kl: float
    degenerate: bool = False
    count: int


class MetricsReport(BaseModel):
    frechet: float
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    density: float = Field(ge=0)
    coverage: float = Field(ge=0, le=1)
    k: int
    n_real: int
    n_fake: int
    embedding: str
    noise: NoiseStats | None = None

    @model_validator(mode="after")
    def check_f1(self) -> "MetricsReport":
        p, r = self.precision, self.recall
        expected = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert abs(self.f1 - expected) < 1e-12, f"f1 {self.f1} inconsistent with precision/recall"
        return self


class SimilarityTrace(BaseModel):
    steps: List[int]
    enc_sim: List[float]
    dec_sim: List[float]
    aggregation: str = "mean over probe seeds"
    estimator: str = "cosine similarity of flattened features between adjacent sampling steps"
    probe_layers: Dict[str, str] = Field(default_factory=lambda: {
        "encoder": "encoder.mid (output of the last mid resblock)",
        "decoder": "decoder.norm_out + silu (input of decoder.conv_out)",
    })
    seeds: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_lengths(self) -> "SimilarityTrace":
        n = max(len(self.steps) - 1, 0)
        assert len(self.enc_sim) == n and len(self.dec_sim) == n, "one similarity per adjacent step pair"
        assert all(-1.0 - 1e-9 <= s <= 1.0 + 1e-9 for s in self.enc_sim + self.dec_sim), "cosine out of range"
        return self


class QualityRow(BaseModel):
    steps: int
    frechet: float


class BenchRow(BaseModel):
    mode: str
    threads: int
    batch: int
    k: int
    repeats: int
    median_ms: float
    min_ms: float
    speedup: float | None = None  # versus loop-free sequential
