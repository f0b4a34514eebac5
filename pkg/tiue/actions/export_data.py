from pathlib import Path

from pydantic import BaseModel, Field

from .base import Action
from ..data import export_dataset, generate_dataset
from ..models.config_models import RunConfig


class ExportDataAction(Action, BaseModel):
    config: RunConfig
    out: Path
    count: int = Field(default=500, ge=1)
    seed: int = 0

    def run(self) -> Path:
        ds = generate_dataset(self.config.data, self.count, self.seed, self.config.model.cond_dim)
        return export_dataset(ds, self.out)
