"""
Teacher pretraining and the alternating student / LoRA distillation loop.

The student is trained image-free: it turns noise into a sample in one encoder pass and K
decoder passes, the sample is scored by the difference between the guided teacher and a
guided LoRA copy of the teacher, and the LoRA copy keeps fitting the student's samples.
"""
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from ..autograd import AdamState, Tensor, TapeGraph, adam_step, ema_update, no_grad
from ..autograd import primitives as P
from ..constant import VARIANCE_FLOOR
from ..errors import EmptyDataset, InvalidAttr, InvalidPlan, NonFinite, TiUEError
from ..logs import error_and_raise, logger
from ..models.config_models import DistillConfig, Spacing, TeacherTrainConfig, WeightKind
from ..utils import CsvLog, array_digest, multi_thread
from .lora import LoRAParams, lora_forward
from .schedule import NoiseSchedule, SamplerPlan, combine, make_plan
from .unet import UNetParams, decode, encode, full_forward

ModelForward = Callable[[Tensor, np.ndarray, Tensor], Tensor]

TEACHER_PROGRESS_HEADER = ["iteration", "loss"]
DISTILL_PROGRESS_HEADER = ["iteration", "vsd_loss", "kl_loss", "lora_loss", "eps_mean", "eps_var"]


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    raw: UNetParams
    ema: UNetParams
    history: List[float]


class VSDResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    grad: np.ndarray
    loss: Tensor
    timesteps: np.ndarray
    weights: np.ndarray


class KLResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    loss: Tensor
    degenerate: bool
    mean: np.ndarray  # (K, batch)
    var: np.ndarray


class DistillResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    student: UNetParams
    ema: UNetParams
    lora: LoRAParams
    plan: SamplerPlan
    history: List[List[float]]


def _noisy(x0: np.ndarray, eps: np.ndarray, t: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bars[t].reshape(-1, 1, 1, 1)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def _check_finite(value: np.ndarray | float, what: str):
    if not np.all(np.isfinite(value)):
        error_and_raise(f"non-finite {what}", NonFinite)


def train_teacher(dataset, config: TeacherTrainConfig, params: UNetParams, sched: NoiseSchedule,
                  noise_hook: Optional[Callable[[tuple], np.ndarray]] = None,
                  on_step: Optional[Callable[[int, float], None]] = None,
                  progress_path: str | Path | None = None) -> TrainResult:
    """
    Standard epsilon-prediction training with condition dropout.
    `noise_hook(shape)` replaces the sampled target noise when given.
    """
    if dataset is None or len(dataset) == 0:
        error_and_raise("teacher training needs a non-empty dataset", EmptyDataset)
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    ema = params.clone(requires_grad=False)
    progress = CsvLog(progress_path, TEACHER_PROGRESS_HEADER)
    history: List[float] = []
    images, conds = dataset.images.astype(params.dtype), dataset.conds.astype(params.dtype)

    for it in tqdm(range(config.iterations), desc="teacher", disable=config.iterations == 0):
        idx = rng.integers(0, len(dataset), size=config.batch)
        x0, cond = images[idx], conds[idx].copy()
        cond[rng.random(config.batch) < config.cond_drop_prob] = 0.0
        t = rng.integers(0, sched.T, size=config.batch)
        eps = noise_hook(x0.shape) if noise_hook else rng.standard_normal(x0.shape)
        eps = np.asarray(eps, dtype=params.dtype)
        x_t = _noisy(x0, eps, t, sched)

        with TapeGraph() as tape:
            pred = full_forward(params, Tensor(x_t), t, Tensor(cond))
            loss = P.mean(P.square(pred - Tensor(eps)))
        value = loss.item()
        _check_finite(value, f"teacher loss at iteration {it}")
        grads = tape.gradients(loss, params.tensors)
        adam_step(params.tensors, grads, state)
        ema_update(ema.tensors, params.tensors, config.ema_decay)

        history.append(value)
        if on_step is not None:
            on_step(it, value)
        if it % config.log_every == 0 or it == config.iterations - 1:
            progress.append([it, value])
            logger.debug(f"teacher iteration {it}: loss={value:.5f}")
    return TrainResult(raw=params, ema=ema, history=history)


def cfg_predict(model_forward: ModelForward, x_t: Tensor, t, cond: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance: eps_u + scale * (eps_c - eps_u), with the zero vector as null condition."""
    if scale < 0:
        error_and_raise(f"guidance scale must be >= 0, got {scale}", InvalidAttr)
    if scale == 1.0:
        return model_forward(x_t, t, cond)
    eps_u = model_forward(x_t, t, Tensor(np.zeros_like(cond.data)))
    if scale == 0.0:
        return eps_u
    eps_c = model_forward(x_t, t, cond)
    return eps_u + (eps_c - eps_u) * scale


def student_one_pass(student: UNetParams, noise: Tensor, plan: SamplerPlan, cond: Tensor):
    """Differentiable loop-free generation: one encoder pass at the key step, K decoder passes."""
    if plan.K < 1 or len(plan.timesteps) != plan.K:
        error_and_raise(f"invalid plan with K={plan.K}", InvalidPlan)
    cache = encode(student, noise, plan.timesteps[0], cond)
    eps_list = [decode(student, cache, t, cond) for t in plan.timesteps]
    return combine(noise, eps_list, plan), eps_list


def _time_weight(alpha_bar: np.ndarray, w_kind: WeightKind) -> np.ndarray:
    if WeightKind(w_kind) == WeightKind.SIGMA2:
        return 1.0 - alpha_bar
    return np.ones_like(alpha_bar)


def _guided(job):
    forward, x_t, t, cond, scale = job
    with no_grad():
        return cfg_predict(forward, x_t, t, cond, scale).data


def vsd_grad(z0: Tensor, teacher: UNetParams, lora: LoRAParams, sched: NoiseSchedule, cond: Tensor,
             rng: np.random.Generator, w_kind: WeightKind = WeightKind.SIGMA2, guidance_scale: float = 4.5,
             lora_base: UNetParams | None = None, t_range=(0.02, 0.98), t: np.ndarray | None = None,
             noise: np.ndarray | None = None, thread_count: int = 2) -> VSDResult:
    """
    Score-difference gradient on a generated sample and the surrogate loss that delivers it.

    g = w(t) * (cfg(teacher) - cfg(lora)) is computed off the tape; the surrogate
    sum(g * z0) has exactly g as its gradient with respect to z0.
    """
    _check_finite(z0.data, "student sample")
    batch = z0.shape[0]
    if t is None:
        lo = int(round(t_range[0] * sched.T))
        hi = max(lo, min(sched.T - 1, int(round(t_range[1] * sched.T))))
        t = rng.integers(lo, hi + 1, size=batch)
    t = np.asarray(t).reshape(-1)
    if noise is None:
        noise = rng.standard_normal(z0.shape)
    noise = np.asarray(noise, dtype=z0.dtype)
    x_t = Tensor(_noisy(z0.data, noise, t, sched))
    base = teacher if lora_base is None else lora_base

    jobs = [
        (lambda x, ts, c: full_forward(teacher, x, ts, c), x_t, t, cond, guidance_scale),
        (lambda x, ts, c: lora_forward(base, lora, x, ts, c), x_t, t, cond, guidance_scale),
    ]
    eps_teacher, eps_lora = multi_thread(_guided, jobs, "job", thread_count)
    _check_finite(eps_teacher, "teacher prediction")
    _check_finite(eps_lora, "LoRA prediction")

    weights = _time_weight(sched.alpha_bars[t], w_kind)
    g = (weights.reshape(-1, 1, 1, 1) * (eps_teacher - eps_lora)).astype(z0.dtype)
    loss = P.sum_(z0 * Tensor(g))
    return VSDResult(grad=g, loss=loss, timesteps=t, weights=weights)


def moment_kl(eps: Tensor) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    KL(N(mu, var) || N(0, 1)) for every item along axis 0, from the moments over the other axes.
    Returns the per-item KL with the raw means and variances; the KL uses variances clamped at VARIANCE_FLOOR.
    """
    axes = tuple(range(1, eps.ndim))
    mu = P.mean(eps, axes)
    var = P.mean(P.square(eps), axes) - P.square(mu)
    raw_mean, raw_var = mu.data.copy(), var.data.copy()
    var = P.clamp_min(var, VARIANCE_FLOOR)
    return (P.square(mu) + var - 1.0 - P.log(var)) * 0.5, raw_mean, raw_var


def kl_loss(eps_list: List[Tensor]) -> KLResult:
    """Moment-matched KL per batch item and prediction, averaged. Clamped variances are reported as degenerate."""
    if not eps_list:
        error_and_raise("kl_loss needs at least one prediction", InvalidAttr)
    total, means, variances = None, [], []
    for eps in eps_list:
        if eps.size == 0:
            error_and_raise("kl_loss got an empty prediction", InvalidAttr)
        kl, mu, var = moment_kl(eps)
        means.append(mu)
        variances.append(var)
        term = P.mean(kl)
        total = term if total is None else total + term
    loss = total * (1.0 / len(eps_list))

    variances = np.stack(variances)
    degenerate = bool(np.any(variances < VARIANCE_FLOOR))
    if degenerate:
        logger.warning(f"Predicted noise variance below {VARIANCE_FLOOR}; clamped")
    return KLResult(loss=loss, degenerate=degenerate, mean=np.stack(means), var=variances)


def lora_step(lora: LoRAParams, base_teacher: UNetParams, z0_detached, sched: NoiseSchedule, cond: Tensor,
              rng: np.random.Generator, state: AdamState, t: np.ndarray | None = None,
              noise: np.ndarray | None = None) -> float:
    """Denoising MSE of the LoRA model on the student's sample; only the LoRA factors move."""
    if isinstance(z0_detached, Tensor):
        if z0_detached.requires_grad:
            error_and_raise("lora_step needs a detached sample", InvalidAttr)
        z0_detached = z0_detached.data
    z0 = np.asarray(z0_detached)
    batch = z0.shape[0]
    t = rng.integers(0, sched.T, size=batch) if t is None else np.asarray(t).reshape(-1)
    noise = rng.standard_normal(z0.shape) if noise is None else noise
    noise = np.asarray(noise, dtype=z0.dtype)
    x = _noisy(z0, noise, t, sched)

    with TapeGraph() as tape:
        pred = lora_forward(base_teacher, lora, Tensor(x), t, cond)
        loss = P.mean(P.square(pred - Tensor(noise)))
    grads = tape.gradients(loss, lora.tensors)
    adam_step(lora.tensors, grads, state)
    return loss.item()


def _namespace_digests(**params) -> dict:
    return {name: array_digest(p.arrays()) for name, p in params.items()}


def distill_loop(teacher: UNetParams, config: DistillConfig, sched: NoiseSchedule, prompt_set: np.ndarray,
                 spacing: Spacing | str = Spacing.TRAILING, progress_path: str | Path | None = None,
                 on_iteration: Optional[Callable[[int, List[float]], None]] = None) -> DistillResult:
    """
    Alternating optimisation of the one-pass student and the LoRA copy of the teacher.
    Only condition vectors are consumed; no images.
    """
    rng = np.random.default_rng(config.seed)
    teacher = teacher.frozen()
    lora_base = teacher.frozen()
    student = teacher.clone(requires_grad=True)
    ema = teacher.clone(requires_grad=False)
    lora = LoRAParams.init(lora_base, rank=config.lora_rank, alpha=config.lora_alpha, seed=config.seed)
    plan = make_plan(config.K, sched, spacing)
    student_state, lora_state = AdamState(lr=config.lr_student), AdamState(lr=config.lr_lora)
    progress = CsvLog(progress_path, DISTILL_PROGRESS_HEADER)
    prompts = np.asarray(prompt_set, dtype=teacher.dtype)
    cfg = teacher.config
    shape = (config.batch, cfg.in_channels, cfg.image_size, cfg.image_size)
    history: List[List[float]] = []

    logger.info(f"Distilling with plan <cyan>{plan.timesteps}</cyan>, KL weight {config.kl_weight}, "
                f"LoRA rank {config.lora_rank}")
    for it in tqdm(range(config.iterations), desc="distill", disable=config.iterations == 0):
        cond = Tensor(prompts[rng.integers(0, len(prompts), size=config.batch)])
        noise = Tensor(rng.standard_normal(shape).astype(teacher.dtype))

        check = config.check_namespaces
        before = _namespace_digests(teacher=teacher, lora_base=lora_base, lora=lora) if check else None
        with TapeGraph() as tape:
            z0, eps_list = student_one_pass(student, noise, plan, cond)
            vsd = vsd_grad(z0, teacher, lora, sched, cond, rng, config.w_kind, config.guidance_scale,
                           lora_base=lora_base, t_range=(config.t_min_frac, config.t_max_frac))
            kl = kl_loss(eps_list)
            total = vsd.loss + kl.loss * config.kl_weight if config.kl_weight > 0 else vsd.loss
        grads = tape.gradients(total, student.tensors)
        for name, g in grads.items():
            _check_finite(g.data, f"student gradient of {name} at iteration {it}")
        adam_step(student.tensors, grads, student_state)
        ema_update(ema.tensors, student.tensors, config.ema_decay)

        middle = _namespace_digests(teacher=teacher, lora_base=lora_base, lora=lora, student=student) \
            if check else None
        lora_loss = lora_step(lora, lora_base, z0.data.copy(), sched, cond, rng, lora_state)
        _check_finite(lora_loss, f"LoRA loss at iteration {it}")
        if check:
            after = _namespace_digests(teacher=teacher, lora_base=lora_base, student=student)
            if before["lora"] != middle["lora"]:
                error_and_raise(f"student step changed LoRA weights at iteration {it}", TiUEError)
            if middle["student"] != after["student"]:
                error_and_raise(f"LoRA step changed student weights at iteration {it}", TiUEError)
            if any(before[k] != after[k] for k in ("teacher", "lora_base")):
                error_and_raise(f"frozen weights changed at iteration {it}", TiUEError)

        row = [it, vsd.loss.item(), kl.loss.item(), lora_loss, float(kl.mean.mean()), float(kl.var.mean())]
        history.append(row)
        if on_iteration is not None:
            on_iteration(it, row)
        if it % config.log_every == 0 or it == config.iterations - 1:
            progress.append(row)
            logger.debug(f"distill iteration {it}: vsd={row[1]:.5f} kl={row[2]:.5f} lora={row[3]:.5f}")
    return DistillResult(student=student, ema=ema, lora=lora, plan=plan, history=history)
