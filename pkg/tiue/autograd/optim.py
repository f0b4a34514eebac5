from typing import Dict, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..errors import DecayOutOfRange, ShapeMismatch
from ..logs import error_and_raise
from .tensor import Tensor


class AdamState(BaseModel):
    """Moment buffers, step counter and hyperparameters of one Adam optimizer."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    lr: float = Field(gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)

    @field_validator("beta1", "beta2")
    @classmethod
    def check_beta(cls, value: float) -> float:
        assert 0 <= value < 1, f"Adam beta must lie in [0, 1), got {value}"
        return value


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor | np.ndarray], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update.
    Parameter arrays are replaced, never written in place, so frozen copies taken earlier stay valid.
    """
    for name, p in params.items():
        if name not in grads:
            error_and_raise(f"no gradient for parameter {name}", ShapeMismatch)
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if g.shape != p.shape:
            error_and_raise(f"gradient of {name} has shape {g.shape}, parameter has {p.shape}", ShapeMismatch)
        if name in state.m and state.m[name].shape != p.shape:
            error_and_raise(f"moment buffer of {name} has shape {state.m[name].shape}, parameter has {p.shape}",
                            ShapeMismatch)

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


def ema_update(shadow: Mapping[str, Tensor], params: Mapping[str, Tensor], decay: float) -> Mapping[str, Tensor]:
    """shadow <- decay * shadow + (1 - decay) * params, per tensor."""
    if not 0.0 <= decay <= 1.0:
        error_and_raise(f"EMA decay must lie in [0, 1], got {decay}", DecayOutOfRange)
    for name, s in shadow.items():
        p = params.get(name)
        if p is None or p.shape != s.shape:
            error_and_raise(f"EMA shadow {name} does not match the parameters", ShapeMismatch)
        if decay == 1.0:
            continue
        if decay == 0.0:
            s.data = p.data.copy()
            continue
        s.data = (decay * s.data + (1.0 - decay) * p.data).astype(s.dtype, copy=False)
    return shadow
