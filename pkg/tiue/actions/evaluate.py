from pathlib import Path

from pydantic import BaseModel, Field

from .base import Action
from ..analysis import predicted_noise_stats
from ..data import load_image_dir
from ..diffusion.schedule import make_plan
from ..errors import ConfigError
from ..logs import error_and_raise, escape, logger
from ..metrics import embed_images, evaluate
from ..models.config_models import EmbeddingKind, SamplerConfig
from ..models.report_models import MetricsReport
from ..utils import save_sidecar

TEACHER_EMBEDDING_PREFIX = "teacher:"


def parse_embedding(text: str) -> tuple[EmbeddingKind, Path | None]:
    """`pixels`, `pooled` or `teacher:CKPT`."""
    if text.startswith(TEACHER_EMBEDDING_PREFIX):
        ckpt = text[len(TEACHER_EMBEDDING_PREFIX):]
        if not ckpt:
            error_and_raise("teacher embedding needs a checkpoint path: teacher:CKPT", ConfigError)
        return EmbeddingKind.TEACHER_ENCODER, Path(ckpt)
    try:
        kind = EmbeddingKind(text)
    except ValueError:
        error_and_raise(f"unknown embedding {text!r}", ConfigError)
    if kind == EmbeddingKind.TEACHER_ENCODER:
        error_and_raise("teacher embedding needs a checkpoint path: teacher:CKPT", ConfigError)
    return kind, None


class EvaluateAction(Action, BaseModel):
    real: Path
    fake: Path
    out: Path
    embedding: str = "pixels"
    k: int = Field(default=3, ge=1)
    noise_model: Path | None = None
    noise_samples: int = Field(default=64, ge=1)
    seed: int = 0
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)

    def run(self) -> MetricsReport:
        kind, teacher_path = parse_embedding(self.embedding)
        teacher = self.load_model(teacher_path).unet_params() if teacher_path is not None else None

        real_images, _ = load_image_dir(self.real)
        fake_images, _ = load_image_dir(self.fake)
        real = embed_images(real_images, kind, teacher=teacher, provenance="real")
        fake = embed_images(fake_images, kind, teacher=teacher, provenance="generated")
        logger.info(f"Evaluating <yellow>{fake.n}</yellow> generated against <yellow>{real.n}</yellow> real "
                    f"images, {kind.value} embedding ({real.d} dims), k={self.k}")

        noise = None
        if self.noise_model is not None:
            ckpt = self.load_model(self.noise_model)
            plan = ckpt.plan or make_plan(self.sampler.K, ckpt.schedule, ckpt.schedule_config.spacing)
            noise = predicted_noise_stats(ckpt.unet_params(), plan, self.noise_samples, self.seed)

        report = evaluate(real, fake, self.k, noise=noise)
        logger.info(f"frechet={report.frechet:.4f} precision={report.precision:.3f} recall={report.recall:.3f} "
                    f"f1={report.f1:.3f} density={report.density:.3f} coverage={report.coverage:.3f}")
        save_sidecar(self.out, report.model_dump(mode="json"))
        logger.info(f"Report written to <yellow>{escape(self.out)}</yellow>")
        return report
