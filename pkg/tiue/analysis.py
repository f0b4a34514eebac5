from pathlib import Path
from typing import List, Tuple

import numpy as np

from .autograd import Tensor, no_grad
from .data import prompt_set
from .diffusion.distill import student_one_pass
from .diffusion.sampler import SampleRequest, sample_ddim, seeded_noise
from .diffusion.schedule import NoiseSchedule, SamplerPlan, ddim_step, select_timesteps
from .diffusion.unet import UNetParams, decode, encode
from .errors import InvalidSteps
from .logs import error_and_raise, logger
from .metrics import FeatureSet, embed_images, frechet_proxy, normality_stats
from .models.config_models import SampleMode, Spacing
from .models.report_models import NoiseStats, QualityRow, SimilarityTrace
from .utils import multi_thread, save_sidecar, write_csv

TRACE_HEADER = ["step_from", "step_to", "enc_sim", "dec_sim"]
QUALITY_HEADER = ["steps", "frechet"]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.reshape(-1).astype(np.float64), b.reshape(-1).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _probe(probe: int, model: UNetParams, sched: NoiseSchedule, timesteps: List[int], terminal: int, seed: int,
           hold_latent: bool) -> Tuple[List[float], List[float]]:
    """Adjacent-step similarities of one sampling run. `hold_latent` keeps z fixed across steps."""
    cfg = model.config
    conds = prompt_set(cfg.cond_dim)
    cond = Tensor(conds[probe % len(conds)][None], dtype=model.dtype)
    z = Tensor(seeded_noise(seed + probe, 0, (1, cfg.in_channels, cfg.image_size, cfg.image_size), model.dtype))
    chain = timesteps + [terminal]
    enc, dec = [], []
    with no_grad():
        for t, t_prev in zip(chain, chain[1:]):
            cache = encode(model, z, t, cond)
            eps, hidden = decode(model, cache, t, cond, return_hidden=True)
            enc.append(cache.mid.data)
            dec.append(hidden.data)
            if not hold_latent:
                z = ddim_step(z, eps, t, t_prev, sched)
    enc_sim = [cosine(a, b) for a, b in zip(enc, enc[1:])]
    dec_sim = [cosine(a, b) for a, b in zip(dec, dec[1:])]
    return enc_sim, dec_sim


def feature_similarity_trace(model: UNetParams, sched: NoiseSchedule, steps: int, probes: int, seed: int,
                             spacing: Spacing | str = Spacing.TRAILING, thread_count: int = 1,
                             hold_latent: bool = False) -> SimilarityTrace:
    """
    Cosine similarity of encoder mid features and final decoder features between consecutive
    DDIM steps, averaged over probe seeds in probe order.
    """
    if steps < 2 or steps > sched.T:
        error_and_raise(f"similarity trace needs 2 <= steps <= {sched.T}, got {steps}", InvalidSteps)
    if probes < 1:
        error_and_raise(f"need at least one probe, got {probes}", InvalidSteps)
    timesteps, terminal = select_timesteps(steps, sched.T, spacing)
    results = multi_thread(_probe, list(range(probes)), "probe", thread_count, model=model, sched=sched,
                           timesteps=timesteps, terminal=terminal, seed=seed, hold_latent=hold_latent)
    enc = np.mean([r[0] for r in results], axis=0)
    dec = np.mean([r[1] for r in results], axis=0)
    logger.info(f"Similarity trace over {steps} steps: encoder mean <green>{enc.mean():.4f}</green>, "
                f"decoder mean <green>{dec.mean():.4f}</green>")
    return SimilarityTrace(steps=timesteps, enc_sim=enc.tolist(), dec_sim=dec.tolist(),
                           seeds=[seed + p for p in range(probes)])


def save_trace(trace: SimilarityTrace, path: str | Path):
    path = Path(path)
    rows = [[a, b, e, d] for a, b, e, d in zip(trace.steps, trace.steps[1:], trace.enc_sim, trace.dec_sim)]
    write_csv(path, TRACE_HEADER, rows)
    save_sidecar(path.with_suffix(".json"), trace.model_dump(mode="json"))


def generate_balanced(model: UNetParams, sched: NoiseSchedule, steps: int, n: int, seed: int,
                      batch: int = 64, spacing: Spacing | str = Spacing.TRAILING) -> np.ndarray:
    """n DDIM samples with conditions cycling through every class; noise stream i for sample i."""
    conds = prompt_set(model.config.cond_dim)
    chunks = []
    for start in range(0, n, batch):
        idx = list(range(start, min(n, start + batch)))
        req = SampleRequest(seed=seed, cond=conds[np.asarray(idx) % len(conds)], mode=SampleMode.DDIM,
                            steps=steps, noise_indices=idx)
        chunks.append(sample_ddim(model, sched, steps, req, spacing=spacing))
    return np.concatenate(chunks)


def quality_vs_steps(model: UNetParams, steps_list: List[int], n_samples: int, real_set: FeatureSet, seed: int,
                     sched: NoiseSchedule, teacher: UNetParams | None = None, out_csv: str | Path | None = None,
                     spacing: Spacing | str = Spacing.TRAILING) -> List[QualityRow]:
    rows = []
    for steps in steps_list:
        if steps < 1:
            error_and_raise(f"step counts must be >= 1, got {steps}", InvalidSteps)
        images = generate_balanced(model, sched, steps, n_samples, seed, spacing=spacing)
        fake = embed_images(images, real_set.kind, teacher=teacher, provenance="generated")
        score = frechet_proxy(real_set, fake)
        logger.info(f"{steps} steps: frechet proxy <green>{score:.4f}</green>")
        rows.append(QualityRow(steps=steps, frechet=score))
    if out_csv is not None:
        write_csv(out_csv, QUALITY_HEADER, [[r.steps, r.frechet] for r in rows])
    return rows


def predicted_noise_stats(model: UNetParams, plan: SamplerPlan, n: int, seed: int, batch: int = 64) -> NoiseStats:
    """Normality of the K noise predictions a student makes during one-pass generation."""
    conds = prompt_set(model.config.cond_dim)
    cfg = model.config
    preds = []
    with no_grad():
        for start in range(0, n, batch):
            idx = list(range(start, min(n, start + batch)))
            noise = np.stack([seeded_noise(seed, i, (cfg.in_channels, cfg.image_size, cfg.image_size), model.dtype)
                              for i in idx])
            cond = Tensor(conds[np.asarray(idx) % len(conds)], dtype=model.dtype)
            _, eps_list = student_one_pass(model, Tensor(noise), plan, cond)
            preds.extend(e.data for e in eps_list)
    stats = normality_stats(np.concatenate(preds))
    logger.info(f"Predicted noise over {n} samples: mean {stats.mean:.4f}, var {stats.var:.4f}, "
                f"KL <green>{stats.kl:.5f}</green>")
    return stats
