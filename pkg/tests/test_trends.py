"""End-to-end training trends on a reduced budget. Run with --runslow."""
import numpy as np
import pytest

from tiue.analysis import feature_similarity_trace, predicted_noise_stats, quality_vs_steps
from tiue.data import generate_dataset, prompt_set
from tiue.diffusion.distill import distill_loop, train_teacher
from tiue.diffusion.sampler import SampleRequest, sample_loopfree
from tiue.diffusion.schedule import NoiseSchedule, make_plan
from tiue.diffusion.unet import UNetParams
from tiue.metrics import density_coverage, embed_images, frechet_proxy
from tiue.models import DistillConfig, SampleMode, ScheduleConfig, TeacherTrainConfig, ToySpec, UNetConfig

pytestmark = pytest.mark.slow

MODEL = UNetConfig(image_size=16, base_channels=16, channel_mult=[1, 2], num_res_blocks=1, time_embed_dim=64,
                   cond_dim=16, groups=4)
SPEC = ToySpec(image_size=16, supersample=2)
SCHEDULE = ScheduleConfig(T=200)


@pytest.fixture(scope="module")
def schedule() -> NoiseSchedule:
    return NoiseSchedule.from_config(SCHEDULE)


@pytest.fixture(scope="module")
def trained(schedule):
    dataset = generate_dataset(SPEC, 1200, seed=0, cond_dim=MODEL.cond_dim)
    config = TeacherTrainConfig(iterations=1500, batch=16, lr=1e-3, ema_decay=0.99, dataset_size=1200)
    return train_teacher(dataset, config, UNetParams.init(MODEL, seed=0), schedule)


@pytest.fixture(scope="module")
def held_out():
    return embed_images(generate_dataset(SPEC, 300, seed=1, cond_dim=MODEL.cond_dim).images, "pooled")


def test_teacher_loss_decreases(trained):
    history = np.asarray(trained.history)
    assert np.all(np.isfinite(history))
    assert history[-50:].mean() < history[:50].mean()


def test_encoder_features_change_less_than_decoder(trained, schedule):
    trace = feature_similarity_trace(trained.ema.frozen(), schedule, steps=50, probes=16, seed=0, thread_count=4)
    assert np.mean(trace.enc_sim) > np.mean(trace.dec_sim)


def test_more_steps_give_better_samples(trained, schedule, held_out):
    rows = quality_vs_steps(trained.ema.frozen(), [2, 50], 300, held_out, seed=0, sched=schedule)
    assert rows[0].frechet > rows[1].frechet


def test_kl_regulariser_pulls_noise_towards_standard_normal(trained, schedule):
    teacher = trained.ema.frozen()
    plan = make_plan(4, schedule)
    kl = {}
    for weight in (0.0, 0.1):
        config = DistillConfig(iterations=300, batch=4, K=4, kl_weight=weight, lora_rank=4, lora_alpha=8.0,
                               lr_student=1e-5, seed=0)
        result = distill_loop(teacher, config, schedule, prompt_set(MODEL.cond_dim))
        kl[weight] = predicted_noise_stats(result.ema, plan, n=64, seed=5).kl
    assert kl[0.1] < kl[0.0]


def test_trained_teacher_beats_untrained(trained, schedule, held_out):
    untrained = UNetParams.init(MODEL, seed=0).frozen()
    before = quality_vs_steps(untrained, [50], 300, held_out, seed=0, sched=schedule)[0].frechet
    after = quality_vs_steps(trained.ema.frozen(), [50], 300, held_out, seed=0, sched=schedule)[0].frechet
    assert after * 5 <= before


def _one_pass(model: UNetParams, plan, n: int) -> np.ndarray:
    conds = prompt_set(MODEL.cond_dim)
    req = SampleRequest(seed=11, cond=conds[np.arange(n) % len(conds)], mode=SampleMode.LOOPFREE_SEQ, plan=plan)
    return sample_loopfree(model, plan, req)


def test_distilled_student_improves_one_pass_samples(trained, schedule, held_out):
    teacher = trained.ema.frozen()
    config = DistillConfig(iterations=800, batch=4, K=4, kl_weight=0.1, lora_rank=4, lora_alpha=8.0,
                           lr_student=1e-4, ema_decay=0.99, seed=0)
    result = distill_loop(teacher, config, schedule, prompt_set(MODEL.cond_dim))
    scores = {}
    for name, model in (("init", teacher), ("distilled", result.ema.frozen())):
        fake = embed_images(_one_pass(model, result.plan, 300), "pooled", provenance="generated")
        scores[name] = (frechet_proxy(held_out, fake), density_coverage(held_out, fake, k=3)[1])
    assert scores["distilled"][0] <= 0.5 * scores["init"][0]
    assert scores["distilled"][1] > scores["init"][1]
