import os
import time
from pathlib import Path
from typing import Callable, List

import numpy as np
from pydantic import BaseModel, Field

from .base import Action
from ..data import prompt_set
from ..diffusion.sampler import SampleRequest, sample_ddim, sample_loopfree
from ..diffusion.schedule import make_plan
from ..logs import escape, logger
from ..models.config_models import SampleMode
from ..models.report_models import BenchRow
from ..utils import save_sidecar, write_csv

BENCH_HEADER = list(BenchRow.model_fields)


def _time_runs(fn: Callable[[], object], repeats: int, warmup: int) -> List[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1000.0)
    return times


class BenchAction(Action, BaseModel):
    model: Path
    out: Path
    k: int = Field(default=4, ge=1)
    threads: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    batch: int = Field(default=16, ge=1)
    repeats: int = Field(default=10, ge=1)
    warmup: int = Field(default=1, ge=0)
    seed: int = 0

    def _row(self, mode: SampleMode, threads: int, fn: Callable[[], object]) -> BenchRow:
        times = _time_runs(fn, self.repeats, self.warmup)
        row = BenchRow(mode=mode.value, threads=threads, batch=self.batch, k=self.k, repeats=self.repeats,
                       median_ms=float(np.median(times)), min_ms=float(np.min(times)))
        logger.info(f"{mode.value:<13} threads={threads}: median <green>{row.median_ms:.1f} ms</green>, "
                    f"min {row.min_ms:.1f} ms")
        return row

    def run(self) -> List[BenchRow]:
        ckpt = self.load_model(self.model)
        model = ckpt.unet_params()
        sched = ckpt.schedule
        spacing = ckpt.schedule_config.spacing
        plan = make_plan(self.k, sched, spacing)
        table = prompt_set(model.config.cond_dim)
        cond = table[np.arange(self.batch) % len(table)].astype(model.dtype)

        def request(mode: SampleMode, threads: int = 1) -> SampleRequest:
            return SampleRequest(seed=self.seed, cond=cond, mode=mode, steps=self.k, plan=plan, thread_count=threads)

        logger.info(f"Benchmarking K={self.k}, batch {self.batch}, {self.repeats} repeats "
                    f"on {os.cpu_count()} CPU(s)")
        seq_req = request(SampleMode.LOOPFREE_SEQ)
        seq = self._row(SampleMode.LOOPFREE_SEQ, 1, lambda: sample_loopfree(model, plan, seq_req, sched))
        rows = [seq]
        for threads in self.threads:
            par_req = request(SampleMode.LOOPFREE_PAR, threads)
            rows.append(self._row(SampleMode.LOOPFREE_PAR, threads,
                                  lambda: sample_loopfree(model, plan, par_req, sched)))
        ddim_req = request(SampleMode.DDIM)
        rows.append(self._row(SampleMode.DDIM, 1, lambda: sample_ddim(model, sched, self.k, ddim_req, spacing)))

        for row in rows:
            row.speedup = seq.median_ms / row.median_ms if row.median_ms > 0 else None

        write_csv(self.out, BENCH_HEADER, [[getattr(r, f) for f in BENCH_HEADER] for r in rows])
        save_sidecar(self.out.with_suffix(".json"), {
            "model": str(self.model),
            "cpu_count": os.cpu_count(),
            "plan": plan.model_dump(mode="json"),
            "rows": [r.model_dump() for r in rows],
        })
        logger.info(f"Benchmark written to <yellow>{escape(self.out)}</yellow>")
        return rows
