from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any

from ..checkpoint import Checkpoint, load_checkpoint
from ..logs import escape, logger


class Action(ABC):
    """
    One unit of work behind a subcommand. Actions get everything they need as fields and
    return their result from `run()`; writing files is part of the work.
    """

    @abstractmethod
    def run(self) -> Any:
        pass

    @staticmethod
    def load_model(path: Path) -> Checkpoint:
        ckpt = load_checkpoint(path)
        plan = f", K={ckpt.plan.K} plan" if ckpt.plan is not None else ""
        logger.info(f"Loaded {ckpt.meta.kind} <yellow>{escape(path)}</yellow> "
                    f"({ckpt.meta.iterations} training iterations{plan})")
        return ckpt
