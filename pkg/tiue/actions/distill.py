from pathlib import Path

from pydantic import BaseModel

from .base import Action
from ..checkpoint import save_checkpoint, student_arrays
from ..data import prompt_set
from ..diffusion.distill import DistillResult, distill_loop
from ..logs import escape, logger
from ..models.checkpoint_models import TrainingMeta
from ..models.config_models import RunConfig
from ..utils import json_digest


class DistillAction(Action, BaseModel):
    config: RunConfig
    teacher: Path
    out: Path
    run_id: str
    progress_path: Path | None = None

    def run(self) -> DistillResult:
        ckpt = self.load_model(self.teacher)
        teacher = ckpt.unet_params()
        if ckpt.unet_config != self.config.model:
            logger.warning("Model section of the config differs from the teacher checkpoint, using the checkpoint's")
        # student shares the teacher's schedule
        sched = ckpt.schedule

        cfg = self.config.distill
        result = distill_loop(teacher, cfg, sched, prompt_set(teacher.config.cond_dim),
                              spacing=ckpt.schedule_config.spacing, progress_path=self.progress_path)

        meta = TrainingMeta(kind="student", iterations=cfg.iterations,
                            config_hash=json_digest(self.config.model_dump(mode="json")), ema=True,
                            run_id=self.run_id, lora_rank=cfg.lora_rank, lora_alpha=cfg.lora_alpha)
        save_checkpoint(self.out, student_arrays(result.ema, result.student, result.lora), teacher.config,
                        ckpt.schedule_config, plan=result.plan, meta=meta)
        logger.info(f"Student checkpoint written to <yellow>{escape(self.out)}</yellow>")
        return result
