from pathlib import Path
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .base import Action
from ..data import parse_condition, prompt_set
from ..diffusion.sampler import SampleRequest, interpolate_conditions, sample, save_images
from ..diffusion.schedule import SamplerPlan, make_plan
from ..errors import InvalidRange
from ..logs import error_and_raise, escape, logger
from ..models.config_models import SampleMode, SamplerConfig
from ..utils import save_sidecar

SAMPLE_BATCH = 64


def parse_interp(text: str, dim: int) -> Tuple[List[str], List[np.ndarray]]:
    """`C1,C2,N` -> names and N condition vectors along the slerp path from C1 to C2."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3 or not parts[2].isdigit():
        error_and_raise(f"--interp expects C1,C2,N, got {text!r}", InvalidRange)
    n = int(parts[2])
    path = interpolate_conditions(parse_condition(parts[0], dim), parse_condition(parts[1], dim), n)
    return [f"{parts[0]}->{parts[1]}@{i}/{n - 1}" for i in range(n)], path


class SampleAction(Action, BaseModel):
    model: Path
    out: Path
    run_id: str
    mode: SampleMode = SampleMode.LOOPFREE_SEQ
    seed: int = 0
    count: int = Field(default=1, ge=1)
    threads: int = Field(default=1, ge=1)
    steps: int | None = None
    k: int | None = None
    interp: str | None = None
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)

    @model_validator(mode="after")
    def check_step_flags(self) -> "SampleAction":
        if self.mode == SampleMode.DDIM:
            assert self.k is None, "--k sets a loop-free plan; ddim mode takes --steps"
        else:
            assert self.steps is None, f"--steps is the DDIM step count; {self.mode.value} mode takes --k"
        return self

    def _plan(self, ckpt) -> SamplerPlan | None:
        if self.mode == SampleMode.DDIM:
            return None
        if self.k is not None:
            return make_plan(self.k, ckpt.schedule, ckpt.schedule_config.spacing)
        if ckpt.plan is not None:
            return ckpt.plan
        return make_plan(self.sampler.K, ckpt.schedule, ckpt.schedule_config.spacing)

    def run(self) -> List[Path]:
        ckpt = self.load_model(self.model)
        model = ckpt.unet_params()
        sched = ckpt.schedule
        plan = self._plan(ckpt)
        steps = self.steps or self.sampler.K

        dim = model.config.cond_dim
        if self.interp is not None:
            names, path = parse_interp(self.interp, dim)
            conds = np.stack(path)
            noise_indices = [0] * len(conds)  # one noise for every point on the path
        else:
            table = prompt_set(dim)
            conds = table[np.arange(self.count) % len(table)]
            names = [f"class {i % len(table)}" for i in range(self.count)]
            noise_indices = list(range(self.count))

        if plan is not None:
            logger.info(f"Sampling <yellow>{len(conds)}</yellow> images in {self.mode.value} mode, "
                        f"plan {plan.timesteps}, {self.threads} thread(s)")
        else:
            logger.info(f"Sampling <yellow>{len(conds)}</yellow> images with {steps} DDIM steps")

        chunks = []
        for start in range(0, len(conds), SAMPLE_BATCH):
            rows = slice(start, start + SAMPLE_BATCH)
            req = SampleRequest(seed=self.seed, cond=conds[rows].astype(model.dtype), mode=self.mode, steps=steps,
                                plan=plan, guidance_scale=self.sampler.guidance_scale,
                                thread_count=self.threads, noise_indices=noise_indices[rows])
            chunks.append(sample(model, sched, req, spacing=ckpt.schedule_config.spacing)
                          if self.mode == SampleMode.DDIM else sample(model, sched, req))
        paths = save_images(np.concatenate(chunks), self.out, self.run_id, self.seed)

        save_sidecar(self.out / f"{self.run_id}_{self.seed}.json", {
            "run_id": self.run_id,
            "seed": self.seed,
            "mode": self.mode.value,
            "guidance_scale": self.sampler.guidance_scale,
            "steps": steps if plan is None else None,
            "plan": plan.model_dump(mode="json") if plan is not None else None,
            "conditions": names,
            "noise_indices": noise_indices,
            "model": str(self.model),
        })
        logger.info(f"Images written to <yellow>{escape(self.out)}</yellow>")
        return paths
