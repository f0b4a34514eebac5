from pathlib import Path
from typing import List

from pydantic import BaseModel, Field

from .base import Action
from ..analysis import feature_similarity_trace, quality_vs_steps, save_trace
from ..data import load_image_dir
from ..errors import ConfigError
from ..logs import error_and_raise, escape, logger
from ..metrics import embed_images
from ..models.config_models import EmbeddingKind
from ..models.report_models import QualityRow, SimilarityTrace
from ..utils import save_sidecar


class AnalyzeAction(Action, BaseModel):
    model: Path
    out: Path
    seed: int = 0
    threads: int = Field(default=1, ge=1)
    # similarity trace
    steps: int | None = None
    probes: int = Field(default=16, ge=1)
    hold_latent: bool = False
    # quality against step count
    quality_steps: List[int] | None = None
    real: Path | None = None
    n_samples: int = Field(default=500, ge=2)
    embedding: EmbeddingKind = EmbeddingKind.POOLED

    def run(self) -> SimilarityTrace | List[QualityRow]:
        ckpt = self.load_model(self.model)
        model = ckpt.unet_params()
        spacing = ckpt.schedule_config.spacing

        if self.quality_steps is not None:
            if self.real is None:
                error_and_raise("quality analysis needs a directory of real images", ConfigError)
            images, _ = load_image_dir(self.real)
            teacher = model if self.embedding == EmbeddingKind.TEACHER_ENCODER else None
            real = embed_images(images, self.embedding, teacher=teacher)
            logger.info(f"Quality against steps {self.quality_steps} on <yellow>{real.n}</yellow> real images")
            rows = quality_vs_steps(model, self.quality_steps, self.n_samples, real, self.seed, ckpt.schedule,
                                    teacher=teacher, out_csv=self.out, spacing=spacing)
            save_sidecar(self.out.with_suffix(".json"), {
                "model": str(self.model), "real": str(self.real), "embedding": self.embedding.value,
                "n_samples": self.n_samples, "seed": self.seed,
                "rows": [r.model_dump() for r in rows],
            })
            logger.info(f"Quality table written to <yellow>{escape(self.out)}</yellow>")
            return rows

        if self.steps is None:
            error_and_raise("similarity analysis needs --steps", ConfigError)
        trace = feature_similarity_trace(model, ckpt.schedule, self.steps, self.probes, self.seed, spacing=spacing,
                                         thread_count=self.threads, hold_latent=self.hold_latent)
        save_trace(trace, self.out)
        logger.info(f"Similarity trace written to <yellow>{escape(self.out)}</yellow>")
        return trace
