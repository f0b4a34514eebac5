from typing import Dict, List, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..autograd import Tensor
from ..autograd import primitives as P
from ..constant import LORA_PREFIX
from ..errors import ShapeMismatch, TargetMissing
from ..logs import error_and_raise
from .unet import UNetParams, full_forward


def lora_targets(base: UNetParams) -> List[str]:
    """Every linear weight and every 1x1 convolution weight, in namespace order."""
    return [
        name for name, t in base.items()
        if name.endswith(".weight") and (t.ndim == 2 or (t.ndim == 4 and t.shape[2:] == (1, 1)))
    ]


def _in_out(weight: Tensor) -> tuple:
    return weight.shape[0], weight.shape[1]


class LoRAParams(BaseModel):
    """
    Low-rank deltas W + (alpha / rank) B A on a set of target weights.
    Tensors are keyed `<target>.A` (rank x in) and `<target>.B` (out x rank).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rank: int = Field(ge=1)
    alpha: float = Field(gt=0)
    targets: List[str]
    tensors: Dict[str, Tensor]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @staticmethod
    def init(base: UNetParams, rank: int = 64, alpha: float = 108.0, seed: int = 0,
             targets: List[str] | None = None) -> "LoRAParams":
        targets = lora_targets(base) if targets is None else list(targets)
        _check_targets(base, targets)
        rng = np.random.default_rng(seed)
        tensors = {}
        for name in targets:
            out_dim, in_dim = _in_out(base[name])
            a = rng.standard_normal((rank, in_dim)) / np.sqrt(rank)
            tensors[f"{name}.A"] = Tensor(a, dtype=base.dtype, requires_grad=True, name=f"{name}.A")
            tensors[f"{name}.B"] = Tensor(np.zeros((out_dim, rank)), dtype=base.dtype, requires_grad=True,
                                          name=f"{name}.B")
        return LoRAParams(rank=rank, alpha=alpha, targets=targets, tensors=tensors)

    @staticmethod
    def from_arrays(arrays: Mapping[str, np.ndarray], rank: int, alpha: float,
                    requires_grad: bool = True) -> "LoRAParams":
        """Rebuild from checkpoint arrays named `lora.<target>.A` / `lora.<target>.B`."""
        tensors, targets = {}, []
        for key, arr in arrays.items():
            if not key.startswith(LORA_PREFIX):
                continue
            name = key[len(LORA_PREFIX):]
            tensors[name] = Tensor(np.array(arr), requires_grad=requires_grad, name=name)
            if name.endswith(".A"):
                targets.append(name[:-2])
        return LoRAParams(rank=rank, alpha=alpha, targets=targets, tensors=tensors)

    def overlay(self, base: UNetParams) -> UNetParams:
        """Base parameters with every target replaced by its adapted weight. The base is left untouched."""
        _check_targets(base, self.targets)
        overrides = {}
        for name in self.targets:
            w = base[name]
            a, b = self.tensors[f"{name}.A"], self.tensors[f"{name}.B"]
            if a.shape != (self.rank, w.shape[1]) or b.shape != (w.shape[0], self.rank):
                error_and_raise(f"LoRA factors for {name} do not fit weight {w.shape}", ShapeMismatch)
            delta = P.reshape(P.matmul(b, a) * self.scale, w.shape)
            overrides[name] = w + delta
        return base.with_overrides(overrides)

    def arrays(self, prefix: str = LORA_PREFIX) -> Dict[str, np.ndarray]:
        return {f"{prefix}{n}": t.data for n, t in self.tensors.items()}

    def frozen(self) -> "LoRAParams":
        tensors = {}
        for n, t in self.tensors.items():
            tensors[n] = Tensor(t.data.copy(), dtype=t.dtype, name=n)
            tensors[n].data.setflags(write=False)
        return LoRAParams(rank=self.rank, alpha=self.alpha, targets=list(self.targets), tensors=tensors)


def _check_targets(base: UNetParams, targets: List[str]):
    allowed = set(lora_targets(base))
    missing = [n for n in targets if n not in allowed]
    if missing:
        error_and_raise(f"LoRA targets not found among linear / 1x1 weights: {missing[:5]}", TargetMissing)


def lora_forward(base: UNetParams, lora: LoRAParams, z, t, cond) -> Tensor:
    return full_forward(lora.overlay(base), z, t, cond)
