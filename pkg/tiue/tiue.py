import re
from pathlib import Path
from typing import Any, Dict, List

import yaml
from pydantic import BaseModel, Field, PrivateAttr, ValidationError, field_validator

from .actions import *
from .constant import CONFIG_LOC, INTERMEDIATE_DATA_LOC
from .errors import ConfigError
from .logs import error_and_raise, escape, logger
from .models import *
from .utils import default_thread_count, new_run_id


class TiUE(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    config_path: Path | None = None

    # Fields set on instantiation
    run_id: str = Field(default_factory=new_run_id)
    _steps: int = PrivateAttr(default=0)

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self._show_banner()

    @staticmethod
    def from_config(file_path: str | Path | None = CONFIG_LOC, **kwargs) -> 'TiUE':
        """
        Initialize a new TiUE instance from a YAML (or JSON) configuration file.

        :param file_path: The path to the configuration file, or None for the built-in defaults.
        :return: A new TiUE instance.
        """
        config_data: Dict[str, Any] = {}
        if file_path is not None:
            try:
                with open(file_path, "r", encoding="utf-8") as file:
                    config_data = yaml.safe_load(file) or {}
            except OSError as e:
                error_and_raise(f"cannot read config {file_path}: {e}", ConfigError)
            except yaml.YAMLError as e:
                error_and_raise(f"config {file_path} is not valid YAML/JSON: {e}", ConfigError)
            if not isinstance(config_data, dict):
                error_and_raise(f"config {file_path} must be a mapping", ConfigError)

        try:
            config = RunConfig(**config_data)
        except ValidationError as e:
            error_and_raise(f"invalid config {file_path}: {e}", ConfigError)

        ret = TiUE(config=config, config_path=Path(file_path) if file_path is not None else None, **kwargs)
        logger.info("<blue>Parsed TiUE config:</blue>")
        logger.info(f"\t<yellow>Current running ID:</yellow> {ret.run_id}")
        logger.info(f"\t<yellow>Config:</yellow> {escape(file_path) if file_path is not None else '(defaults)'}")
        m = config.model
        logger.info(f"\t<yellow>UNet:</yellow> {m.image_size}px, channels {m.level_channels}, "
                    f"{m.num_res_blocks} resblocks per level")
        logger.info(f"\t<yellow>Schedule:</yellow> T={config.schedule.T} {config.schedule.kind.value}, "
                    f"{config.schedule.spacing.value} spacing")
        if config.debug:
            logger.debug(f"Full config: {escape(config.model_dump_json())}")
        return ret

    @field_validator('run_id')
    @classmethod
    def check_run_id(cls, value: str) -> str:
        assert re.fullmatch("[_0-9a-zA-Z-]+", value) is not None, f"Not a valid run id: {value}"
        return value

    @staticmethod
    def _show_banner():
        logger.info(r"""<red>
   __  _ __  ________
  / /_(_) / / / ____/
 / __/ / / / / __/
/ /_/ / /_/ / /___
\__/_/\____/_____/
</red>""")

    def _print_new_stage(self, msg: str):
        self._steps += 1
        logger.info(f"<blue>Stage {self._steps}. {msg}</blue>")

    def _threads(self, threads: int | None) -> int:
        if threads is not None:
            return threads
        return self.config.sampler.thread_count or default_thread_count()

    def train_teacher(self, out: str | Path, progress: str | Path | None = None):
        self._print_new_stage("Train the toy teacher.")
        return TrainTeacherAction(config=self.config, out=Path(out), run_id=self.run_id,
                                  progress_path=progress).run()

    def distill(self, teacher: str | Path, out: str | Path, progress: str | Path | None = None):
        self._print_new_stage("Distill the teacher into a one-pass student.")
        return DistillAction(config=self.config, teacher=Path(teacher), out=Path(out), run_id=self.run_id,
                             progress_path=progress).run()

    def sample(self, model: str | Path, out: str | Path, threads: int | None = None, **kwargs) -> List[Path]:
        self._print_new_stage("Generate images.")
        return SampleAction(model=Path(model), out=Path(out), run_id=self.run_id, threads=self._threads(threads),
                            sampler=self.config.sampler, **kwargs).run()

    def analyze(self, model: str | Path, out: str | Path, threads: int | None = None, **kwargs):
        self._print_new_stage("Analyze features across sampling steps.")
        return AnalyzeAction(model=Path(model), out=Path(out), threads=self._threads(threads), **kwargs).run()

    def evaluate(self, real: str | Path, fake: str | Path, out: str | Path, **kwargs) -> MetricsReport:
        self._print_new_stage("Evaluate generated images.")
        return EvaluateAction(real=Path(real), fake=Path(fake), out=Path(out), sampler=self.config.sampler,
                              **kwargs).run()

    def bench(self, model: str | Path, out: str | Path, **kwargs) -> List[BenchRow]:
        self._print_new_stage("Benchmark sampling modes.")
        return BenchAction(model=Path(model), out=Path(out), **kwargs).run()

    def export_data(self, out: str | Path, count: int, seed: int = 0) -> Path:
        self._print_new_stage("Export the toy dataset.")
        return ExportDataAction(config=self.config, out=Path(out), count=count, seed=seed).run()

    def run(self, work_dir: str | Path | None = None, eval_count: int = 500, seed: int = 0) -> MetricsReport:
        """
        Start running the whole procedure, keeping every artefact under `work_dir`
        (by default `intermediates/<run id>`).

        Stage 1. Export held-out real images.
        Stage 2. Train the teacher.
        Stage 3. Distill the student.
        Stage 4. Sample from the student in loop-free parallel mode.
        Stage 5. Evaluate the samples against the held-out images.
        """
        work = Path(work_dir) if work_dir is not None else INTERMEDIATE_DATA_LOC / self.run_id
        logger.info(f"Start a full run in <yellow>{escape(work)}</yellow>.")

        # held-out seed differs from the training seed
        self.export_data(work / "real", eval_count, seed=self.config.teacher.seed + 1)
        self.train_teacher(work / "teacher.ckpt", progress=work / "teacher_progress.csv")
        self.distill(work / "teacher.ckpt", work / "student.ckpt", progress=work / "distill_progress.csv")
        self.sample(work / "student.ckpt", work / "samples", mode=SampleMode.LOOPFREE_PAR, seed=seed,
                    count=eval_count)
        report = self.evaluate(work / "real", work / "samples", work / "report.json", embedding="pooled",
                               noise_model=work / "student.ckpt")

        logger.info("<magenta>All stages completed successfully.</magenta>")
        return report
