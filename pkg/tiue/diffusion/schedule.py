"""
Discrete noise schedule, the deterministic DDIM update, and the closed-form coefficients
that collapse K sequential DDIM updates into one weighted sum of noises.
"""
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_serializer, model_validator

from ..autograd import Tensor
from ..constant import TERMINAL_INDEX
from ..errors import InvalidK, InvalidRange, InvalidTimestep, ShapeMismatch
from ..logs import error_and_raise
from ..models.config_models import ScheduleConfig, ScheduleKind, Spacing


class NoiseSchedule(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    betas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bar_final: float

    @property
    def T(self) -> int:
        return len(self.alpha_bars)

    @model_validator(mode="after")
    def check_arrays(self) -> "NoiseSchedule":
        assert self.betas.ndim == 1 and self.betas.shape == self.alpha_bars.shape and len(self.betas) >= 1
        assert np.all((self.alpha_bars > 0) & (self.alpha_bars < 1)), "alpha_bars must lie in (0, 1)"
        assert np.all(np.diff(self.alpha_bars) <= 0), "alpha_bars must not increase"
        assert 0 < self.alpha_bar_final < 1
        self.betas.setflags(write=False)
        self.alpha_bars.setflags(write=False)
        return self

    @staticmethod
    def from_betas(betas: np.ndarray) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas), alpha_bar_final=float(1.0 - betas[0]))

    @staticmethod
    def from_alpha_bars(alpha_bars: np.ndarray, alpha_bar_final: float | None = None) -> "NoiseSchedule":
        """Build from cumulative products directly. Used for constant and randomized test schedules."""
        alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        betas = 1.0 - alpha_bars / prev
        final = float(alpha_bars[0]) if alpha_bar_final is None else float(alpha_bar_final)
        return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, alpha_bar_final=final)

    @staticmethod
    def from_config(config: ScheduleConfig) -> "NoiseSchedule":
        return build_schedule(config.T, config.beta_start, config.beta_end, config.kind)

    def alpha_bar(self, index: int) -> float:
        if index == TERMINAL_INDEX:
            return self.alpha_bar_final
        if not 0 <= index < self.T:
            error_and_raise(f"timestep {index} outside [0, {self.T})", InvalidTimestep)
        return float(self.alpha_bars[index])

    def describe(self) -> dict:
        return {"T": self.T, "alpha_bar_first": float(self.alpha_bars[0]), "alpha_bar_last": float(self.alpha_bars[-1])}


def build_schedule(T: int, beta_start: float, beta_end: float,
                   kind: ScheduleKind | str = ScheduleKind.SCALED_LINEAR) -> NoiseSchedule:
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        error_and_raise(f"invalid schedule T={T}, beta_start={beta_start}, beta_end={beta_end}", InvalidRange)
    kind = ScheduleKind(kind)
    if kind == ScheduleKind.LINEAR:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    return NoiseSchedule.from_betas(betas)


def _ddim_coeffs(a_t: float, a_prev: float) -> Tuple[float, float]:
    a = np.sqrt(a_prev / a_t)
    b = np.sqrt(a_prev) * (np.sqrt(1.0 / a_prev - 1.0) - np.sqrt(1.0 / a_t - 1.0))
    return float(a), float(b)


def ddim_step(z_t: Tensor | np.ndarray, eps: Tensor | np.ndarray, t: int, t_prev: int, sched: NoiseSchedule):
    """
    One deterministic DDIM update from index `t` to `t_prev` (TERMINAL_INDEX for the final target).
    Works on plain arrays and on tensors; on tensors the update is recorded for differentiation.
    """
    if z_t.shape != eps.shape:
        error_and_raise(f"ddim_step shape mismatch: {z_t.shape} vs {eps.shape}", ShapeMismatch)
    a_t, a_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    if a_prev < a_t:
        error_and_raise(f"ddim_step must move toward less noise: alpha_bar({t_prev})={a_prev} < "
                        f"alpha_bar({t})={a_t}", InvalidTimestep)
    a, b = _ddim_coeffs(a_t, a_prev)
    if isinstance(z_t, Tensor):
        return z_t * a + eps * b
    dtype = z_t.dtype
    return z_t * dtype.type(a) + eps * dtype.type(b)


def select_timesteps(K: int, T: int, spacing: Spacing | str = Spacing.TRAILING) -> Tuple[List[int], int]:
    """
    Decreasing schedule indices for K steps plus the terminal index.

    trailing: tau_i = round(i * T / K) - 1, so the first step always starts at T - 1.
    leading: tau_i = (i - 1) * (T // K), so the last step always ends at index 0.
    """
    if not 1 <= K <= T:
        error_and_raise(f"K={K} must satisfy 1 <= K <= T={T}", InvalidK)
    spacing = Spacing(spacing)
    if spacing == Spacing.TRAILING:
        # round half up; Python's round() is half-to-even
        steps = [int(np.floor(i * T / K + 0.5)) - 1 for i in range(K, 0, -1)]
    else:
        steps = [(i - 1) * (T // K) for i in range(K, 0, -1)]
    return steps, TERMINAL_INDEX


class SamplerPlan(BaseModel):
    """
    Closed-form loop-free sampling coefficients.
    `E` is ordered like `timesteps`: E[0] multiplies the prediction at timesteps[0] (the key step).
    """
    model_config = ConfigDict(frozen=True)

    K: int
    timesteps: List[int]
    terminal_index: int = TERMINAL_INDEX
    S: float
    E: List[float]

    @model_validator(mode="after")
    def check_plan(self) -> "SamplerPlan":
        assert self.K >= 1 and len(self.timesteps) == self.K and len(self.E) == self.K, "plan length mismatch"
        assert all(a > b for a, b in zip(self.timesteps, self.timesteps[1:])), "timesteps must strictly decrease"
        return self

    @field_serializer("E")
    def serialize_e(self, value: List[float]) -> List[float]:
        return [float(v) for v in value]


def loopfree_coeffs(timesteps: List[int], terminal: int, sched: NoiseSchedule) -> SamplerPlan:
    """
    Unroll K DDIM steps z_{k-1} = a_k z_k + b_k eps_k into z_0 = S eps + sum_k E_k eps_k.
    S is the product of all scale factors, E_k is b_k times the scale factors downstream of step k.
    """
    if len(timesteps) < 1:
        error_and_raise("loop-free plan needs at least one timestep", InvalidTimestep)
    if any(a <= b for a, b in zip(timesteps, timesteps[1:])):
        error_and_raise(f"timesteps must strictly decrease, got {timesteps}", InvalidTimestep)
    chain = list(timesteps) + [terminal]
    alpha = [sched.alpha_bar(i) for i in chain]
    for i in range(len(timesteps)):
        if alpha[i + 1] < alpha[i]:
            error_and_raise(f"step {chain[i]} -> {chain[i + 1]} increases noise", InvalidTimestep)

    coeffs = [_ddim_coeffs(alpha[i], alpha[i + 1]) for i in range(len(timesteps))]
    E = []
    for k, (_, b) in enumerate(coeffs):
        downstream = 1.0
        for a, _ in coeffs[k + 1:]:
            downstream *= a
        E.append(b * downstream)
    # the product of the per-step ratios telescopes
    S = float(np.sqrt(alpha[-1] / alpha[0]))
    return SamplerPlan(K=len(timesteps), timesteps=list(timesteps), terminal_index=terminal, S=S, E=E)


def make_plan(K: int, sched: NoiseSchedule, spacing: Spacing | str = Spacing.TRAILING) -> SamplerPlan:
    steps, terminal = select_timesteps(K, sched.T, spacing)
    return loopfree_coeffs(steps, terminal, sched)


def combine(noise, eps_list, plan: SamplerPlan):
    """z_0 = S * noise + sum E_k * eps_k, accumulated in plan order (key step first)."""
    out = noise * plan.S if isinstance(noise, Tensor) else noise * noise.dtype.type(plan.S)
    for eps, e in zip(eps_list, plan.E):
        out = out + (eps * e if isinstance(eps, Tensor) else eps * eps.dtype.type(e))
    return out
