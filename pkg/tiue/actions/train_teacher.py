from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .base import Action
from ..checkpoint import save_checkpoint
from ..data import generate_dataset
from ..diffusion.distill import TrainResult, train_teacher
from ..diffusion.schedule import NoiseSchedule
from ..diffusion.unet import UNetParams
from ..logs import escape, logger
from ..models.checkpoint_models import TrainingMeta
from ..models.config_models import RunConfig
from ..utils import json_digest


class TrainTeacherAction(Action, BaseModel):
    config: RunConfig
    out: Path
    run_id: str
    progress_path: Path | None = None

    def run(self) -> TrainResult:
        cfg = self.config
        dataset = generate_dataset(cfg.data, cfg.teacher.dataset_size, cfg.teacher.seed, cfg.model.cond_dim)
        params = UNetParams.init(cfg.model, seed=cfg.teacher.seed, dtype=np.float32)
        logger.info(f"Training teacher on <yellow>{len(dataset)}</yellow> images, "
                    f"{params.num_parameters()} parameters, {cfg.teacher.iterations} iterations")

        result = train_teacher(dataset, cfg.teacher, params, NoiseSchedule.from_config(cfg.schedule),
                               progress_path=self.progress_path)
        if result.history:
            logger.info(f"Final teacher loss <green>{result.history[-1]:.5f}</green>")

        meta = TrainingMeta(kind="teacher", iterations=cfg.teacher.iterations,
                            config_hash=json_digest(cfg.model_dump(mode="json")), ema=True, run_id=self.run_id)
        save_checkpoint(self.out, result.ema.arrays(), cfg.model, cfg.schedule, meta=meta)
        logger.info(f"Teacher checkpoint written to <yellow>{escape(self.out)}</yellow>")
        return result
