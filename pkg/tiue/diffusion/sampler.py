from pathlib import Path
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..autograd import Tensor, no_grad
from ..constant import PPM_MAXVAL
from ..errors import DimMismatch, InvalidPlan, InvalidRange, InvalidSteps
from ..logs import error_and_raise, escape, logger
from ..models.config_models import SampleMode, Spacing
from ..utils import multi_thread, write_ppm
from .schedule import NoiseSchedule, SamplerPlan, combine, ddim_step, select_timesteps
from .distill import cfg_predict
from .unet import EncoderCache, UNetParams, decode, encode, full_forward

_SEED_MASK = (1 << 64) - 1


class SampleRequest(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    seed: int
    cond: np.ndarray  # (batch, cond_dim)
    mode: SampleMode = SampleMode.LOOPFREE_SEQ
    steps: int | None = None
    plan: SamplerPlan | None = None
    guidance_scale: float = Field(default=1.0, ge=0)
    thread_count: int = Field(default=1, ge=1)
    # Noise stream per row; defaults to the row index. Interpolation pins every row to one stream.
    noise_indices: List[int] | None = None

    @property
    def batch(self) -> int:
        return self.cond.shape[0]

    @model_validator(mode="after")
    def check_request(self) -> "SampleRequest":
        assert self.cond.ndim == 2 and self.cond.shape[0] >= 1, f"cond must be (batch, dim), got {self.cond.shape}"
        if self.mode == SampleMode.DDIM:
            assert self.steps is not None, "ddim mode needs a step count"
        else:
            assert self.plan is not None, "loop-free modes need a sampler plan"
        assert self.noise_indices is None or len(self.noise_indices) == self.batch, "one noise index per row"
        return self


def seeded_noise(seed: int, index: int, shape, dtype=np.float32) -> np.ndarray:
    """Standard normal noise from a counter-based generator keyed by (seed, index)."""
    key = np.array([seed & _SEED_MASK, index & _SEED_MASK], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.standard_normal(shape).astype(dtype)


def initial_noise(req: SampleRequest, model: UNetParams) -> np.ndarray:
    cfg = model.config
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    indices = req.noise_indices if req.noise_indices is not None else range(req.batch)
    return np.stack([seeded_noise(req.seed, i, shape, model.dtype) for i in indices])


def to_pixels(z: np.ndarray) -> np.ndarray:
    """(B, 3, H, W) in [-1, 1] -> (B, H, W, 3) uint8."""
    z = np.clip(np.asarray(z, dtype=np.float64), -1.0, 1.0)
    pix = np.round(PPM_MAXVAL * (z + 1.0) / 2.0).astype(np.uint8)
    return np.ascontiguousarray(pix.transpose(0, 2, 3, 1))


def from_pixels(pix: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, H, W, 3) uint8 -> (B, 3, H, W) in [-1, 1]."""
    z = np.asarray(pix, dtype=np.float64) / (PPM_MAXVAL / 2.0) - 1.0
    return np.ascontiguousarray(z.transpose(0, 3, 1, 2)).astype(dtype)


def sample_ddim(model: UNetParams, sched: NoiseSchedule, steps: int, req: SampleRequest,
                spacing: Spacing | str = Spacing.TRAILING, return_latent: bool = False) -> np.ndarray:
    """Iterated DDIM: one full network pass per step."""
    if not 1 <= steps <= sched.T:
        error_and_raise(f"steps={steps} must lie in [1, {sched.T}]", InvalidSteps)
    timesteps, terminal = select_timesteps(steps, sched.T, spacing)
    chain = timesteps + [terminal]
    cond = Tensor(req.cond, dtype=model.dtype)
    with no_grad():
        z = Tensor(initial_noise(req, model))
        for t, t_prev in zip(chain, chain[1:]):
            eps = cfg_predict(lambda x, ts, c: full_forward(model, x, ts, c), z, t, cond, req.guidance_scale)
            z = ddim_step(z, eps, t, t_prev, sched)
    return z.data if return_latent else to_pixels(z.data)


def _decode_one(t_dec: int, model: UNetParams, cache: EncoderCache, cond: Tensor, scale: float = 1.0,
                null_cache: EncoderCache | None = None) -> Tensor:
    if scale == 1.0:
        return decode(model, cache, t_dec, cond)
    eps_u = decode(model, null_cache, t_dec, null_cache.cond)
    if scale == 0.0:
        return eps_u
    return eps_u + (decode(model, cache, t_dec, cond) - eps_u) * scale


def decode_all(model: UNetParams, cache: EncoderCache, plan: SamplerPlan, cond: Tensor,
               thread_count: int = 1, scale: float = 1.0, null_cache: EncoderCache | None = None) -> List[Tensor]:
    """
    Noise predictions at every plan step, in plan order. Each worker writes only its own slot.
    A guidance scale other than 1 also decodes `null_cache`, the encoding under the null condition.
    """
    return multi_thread(_decode_one, plan.timesteps, "t_dec", thread_count, model=model, cache=cache, cond=cond,
                        scale=scale, null_cache=null_cache)


def sample_loopfree(model: UNetParams, plan: SamplerPlan, req: SampleRequest,
                    sched: NoiseSchedule | None = None, return_latent: bool = False) -> np.ndarray:
    """Encode once at the key step, decode at every plan step, combine in closed form."""
    if sched is not None and (max(plan.timesteps) >= sched.T or min(plan.timesteps) < 0):
        error_and_raise(f"plan timesteps {plan.timesteps} do not fit a schedule of {sched.T} steps", InvalidPlan)
    if plan.K != len(plan.timesteps):
        error_and_raise("plan K does not match its timesteps", InvalidPlan)
    threads = req.thread_count if req.mode == SampleMode.LOOPFREE_PAR else 1
    cond = Tensor(req.cond, dtype=model.dtype)
    with no_grad():
        noise = Tensor(initial_noise(req, model))
        cache = encode(model, noise, plan.timesteps[0], cond)
        null_cache = None
        if req.guidance_scale != 1.0:
            null_cache = encode(model, noise, plan.timesteps[0], Tensor(np.zeros_like(cond.data)))
        eps_list = decode_all(model, cache, plan, cond, threads, req.guidance_scale, null_cache)
        z0 = combine(noise, eps_list, plan)
    logger.debug(f"Loop-free sample: K={plan.K}, threads={threads}, batch={req.batch}")
    return z0.data if return_latent else to_pixels(z0.data)


def sample(model: UNetParams, sched: NoiseSchedule, req: SampleRequest, **kwargs) -> np.ndarray:
    if req.mode == SampleMode.DDIM:
        return sample_ddim(model, sched, req.steps, req, **kwargs)
    return sample_loopfree(model, req.plan, req, sched=sched, **kwargs)


def interpolate_conditions(c1: np.ndarray, c2: np.ndarray, n: int) -> List[np.ndarray]:
    """
    Spherical interpolation from c1 to c2 at n evenly spaced points, endpoints included exactly.
    Falls back to linear interpolation when either vector is zero or the two are colinear.
    """
    c1, c2 = np.asarray(c1, dtype=np.float64), np.asarray(c2, dtype=np.float64)
    if c1.shape != c2.shape or c1.ndim != 1:
        error_and_raise(f"cannot interpolate between shapes {c1.shape} and {c2.shape}", DimMismatch)
    if n < 2:
        error_and_raise(f"interpolation needs n >= 2, got {n}", InvalidRange)

    n1, n2 = np.linalg.norm(c1), np.linalg.norm(c2)
    omega, sin_omega = 0.0, 0.0
    if n1 > 0 and n2 > 0:
        omega = float(np.arccos(np.clip(np.dot(c1, c2) / (n1 * n2), -1.0, 1.0)))
        sin_omega = float(np.sin(omega))

    out = []
    for s in np.linspace(0.0, 1.0, n):
        if sin_omega < 1e-6:
            out.append(c1 + s * (c2 - c1))
        else:
            out.append(np.sin((1.0 - s) * omega) / sin_omega * c1 + np.sin(s * omega) / sin_omega * c2)
    out[0], out[-1] = c1.copy(), c2.copy()
    return out


def save_images(pixels: np.ndarray, out_dir: str | Path, run_id: str, seed: int) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, img in enumerate(pixels):
        path = out_dir / f"{run_id}_{seed}_{index}.ppm"
        write_ppm(path, img)
        paths.append(path)
    logger.info(f"Saved <green>{len(paths)}</green> images to {escape(out_dir)}")
    return paths
