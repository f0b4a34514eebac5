import csv

import numpy as np
import pytest

from tiue.autograd import AdamState, Tensor, TapeGraph
from tiue.data import generate_dataset, prompt_set
from tiue.diffusion.distill import (DISTILL_PROGRESS_HEADER, cfg_predict, distill_loop, kl_loss, lora_step,
                                    student_one_pass, train_teacher, vsd_grad)
from tiue.diffusion.lora import LoRAParams
from tiue.diffusion.schedule import combine, make_plan
from tiue.diffusion.unet import UNetParams
from tiue.errors import EmptyDataset, InvalidAttr, NonFinite
from tiue.models import WeightKind

from .helpers import gradcheck


# full-rank adapters on the 8-16 channel test network
OVERFIT_RANK, OVERFIT_ALPHA, OVERFIT_LR = 16, 32.0, 5e-3


def _standardised(rng, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    axes = tuple(range(1, len(shape)))
    x = x - x.mean(axis=axes, keepdims=True)
    return x / x.std(axis=axes, keepdims=True)


@pytest.fixture
def tiny_dataset(tiny_run_config):
    return generate_dataset(tiny_run_config.data, 24, seed=0, cond_dim=tiny_run_config.model.cond_dim)


class TestGuidance:

    @staticmethod
    def _forward(x, t, c):
        return Tensor(np.full(x.shape, float(c.data.sum()) + 1.0))

    def test_scale_one_is_conditional(self):
        x, c = Tensor(np.zeros((1, 2))), Tensor(np.array([[2.0, 1.0]]))
        np.testing.assert_array_equal(cfg_predict(self._forward, x, 0, c, 1.0).data, 4.0)

    def test_scale_zero_is_unconditional(self):
        x, c = Tensor(np.zeros((1, 2))), Tensor(np.array([[2.0, 1.0]]))
        np.testing.assert_array_equal(cfg_predict(self._forward, x, 0, c, 0.0).data, 1.0)

    def test_extrapolates(self):
        x, c = Tensor(np.zeros((1, 2))), Tensor(np.array([[2.0, 1.0]]))
        np.testing.assert_allclose(cfg_predict(self._forward, x, 0, c, 4.5).data, 1.0 + 4.5 * 3.0)

    def test_negative_scale(self):
        with pytest.raises(InvalidAttr):
            cfg_predict(self._forward, Tensor(np.zeros((1, 2))), 0, Tensor(np.zeros((1, 2))), -1.0)


class TestKL:

    def test_zero_at_standard_normal(self, rng):
        eps = Tensor(_standardised(rng, (3, 3, 4, 4)))
        assert kl_loss([eps]).loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_mean_shift(self, rng):
        eps = Tensor(_standardised(rng, (2, 3, 4, 4)) + 1.0)
        assert kl_loss([eps, eps]).loss.item() == pytest.approx(0.5, abs=1e-12)

    def test_moment_formula(self, rng):
        eps = rng.normal(0.3, 1.7, size=(1, 3, 8, 8))
        mu, var = eps.mean(), eps.var()
        expected = 0.5 * (mu ** 2 + var - 1.0 - np.log(var))
        assert kl_loss([Tensor(eps)]).loss.item() == pytest.approx(expected, rel=1e-12)

    def test_matches_gaussian_kl_on_large_samples(self):
        eps = np.random.default_rng(0).normal(0.5, 0.8, size=(1, 400_000))
        expected = 0.5 * (0.25 + 0.64 - 1.0 - np.log(0.64))
        assert kl_loss([Tensor(eps)]).loss.item() == pytest.approx(expected, abs=1e-2)

    def test_averages_over_predictions(self, rng):
        a = Tensor(_standardised(rng, (2, 3, 4, 4)))
        b = Tensor(_standardised(rng, (2, 3, 4, 4)) + 2.0)
        assert kl_loss([a, b]).loss.item() == pytest.approx((0.0 + 2.0) / 2, abs=1e-12)

    def test_gradient(self, rng):
        inputs = {"a": rng.standard_normal((2, 3, 2, 2)), "b": rng.standard_normal((2, 3, 2, 2))}
        assert gradcheck(lambda a, b: kl_loss([a, b]).loss, inputs) < 1e-6

    def test_degenerate_variance_is_clamped(self):
        result = kl_loss([Tensor(np.zeros((2, 3, 4, 4)))])
        assert result.degenerate
        assert np.isfinite(result.loss.item())

    def test_empty(self):
        with pytest.raises(InvalidAttr):
            kl_loss([])


class TestVSD:

    @pytest.fixture
    def setup(self, tiny_params, tiny_schedule, cond_batch):
        teacher = tiny_params.frozen()
        lora = LoRAParams.init(teacher, rank=2, alpha=4.0, seed=0)
        z0 = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        return teacher, lora, z0, Tensor(cond_batch(2))

    def test_surrogate_gradient_is_exact(self, setup, tiny_schedule):
        teacher, lora, z0, cond = setup
        lora = LoRAParams(rank=lora.rank, alpha=lora.alpha, targets=lora.targets, tensors={
            n: Tensor(np.full(t.shape, 0.05, dtype=np.float32)) for n, t in lora.tensors.items()
        })
        with TapeGraph() as tape:
            result = vsd_grad(z0, teacher, lora, tiny_schedule, cond, np.random.default_rng(1))
        grad = tape.backward(result.loss, wrt=[z0])[z0].data
        assert np.any(result.grad)
        assert grad.tobytes() == result.grad.tobytes()

    def test_fresh_lora_gives_zero_gradient(self, setup, tiny_schedule):
        teacher, lora, z0, cond = setup
        result = vsd_grad(z0, teacher, lora, tiny_schedule, cond, np.random.default_rng(1))
        np.testing.assert_array_equal(result.grad, 0.0)

    def test_time_weights(self, setup, tiny_schedule):
        teacher, lora, z0, cond = setup
        t = np.array([3, 40])
        sigma2 = vsd_grad(z0, teacher, lora, tiny_schedule, cond, np.random.default_rng(1), t=t)
        np.testing.assert_allclose(sigma2.weights, 1.0 - tiny_schedule.alpha_bars[t])
        const = vsd_grad(z0, teacher, lora, tiny_schedule, cond, np.random.default_rng(1), t=t,
                         w_kind=WeightKind.CONSTANT)
        np.testing.assert_array_equal(const.weights, 1.0)

    def test_timesteps_in_range(self, setup, tiny_schedule):
        teacher, lora, z0, cond = setup
        for seed in range(10):
            t = vsd_grad(z0, teacher, lora, tiny_schedule, cond, np.random.default_rng(seed),
                         t_range=(0.2, 0.4)).timesteps
            assert np.all((t >= 10) & (t <= 20))

    def test_non_finite_sample(self, setup, tiny_schedule):
        teacher, lora, _, cond = setup
        z0 = Tensor(np.full((2, 3, 8, 8), np.nan, dtype=np.float32))
        with pytest.raises(NonFinite):
            vsd_grad(z0, teacher, lora, tiny_schedule, cond, np.random.default_rng(0))


class TestLoRAStep:

    def test_only_lora_moves(self, tiny_params, tiny_schedule, cond_batch):
        base = tiny_params.frozen()
        lora = LoRAParams.init(base, rank=2, alpha=4.0)
        before_base, before_lora = base.digest(), {n: t.data.copy() for n, t in lora.tensors.items()}
        z0 = np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)
        loss = lora_step(lora, base, z0, tiny_schedule, Tensor(cond_batch(2)), np.random.default_rng(0),
                         AdamState(lr=1e-3))
        assert np.isfinite(loss)
        assert base.digest() == before_base
        assert any(not np.array_equal(t.data, before_lora[n]) for n, t in lora.tensors.items())

    def test_needs_detached_sample(self, tiny_params, tiny_schedule, cond_batch):
        base = tiny_params.frozen()
        lora = LoRAParams.init(base, rank=2, alpha=4.0)
        z0 = Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32), requires_grad=True)
        with pytest.raises(InvalidAttr):
            lora_step(lora, base, z0, tiny_schedule, Tensor(cond_batch(2)), np.random.default_rng(0),
                      AdamState(lr=1e-3))

    def test_overfits_one_fixed_sample(self, tiny_params, tiny_schedule, cond_batch):
        base = tiny_params.frozen()
        lora = LoRAParams.init(base, rank=OVERFIT_RANK, alpha=OVERFIT_ALPHA)
        fixed = np.random.default_rng(5)
        z0 = fixed.standard_normal((1, 3, 8, 8)).astype(np.float32)
        noise = fixed.standard_normal((1, 3, 8, 8)).astype(np.float32)
        state, cond, rng = AdamState(lr=OVERFIT_LR), Tensor(cond_batch(1)), np.random.default_rng(0)
        losses = [lora_step(lora, base, z0, tiny_schedule, cond, rng, state, t=np.array([25]), noise=noise)
                  for _ in range(201)]
        assert all(v >= 0 for v in losses)
        assert base.digest() == tiny_params.digest()
        assert losses[-1] < 0.1 * losses[0]


class TestStudentPass:

    def test_matches_sampler_combination(self, tiny_params, tiny_schedule, cond_batch):
        plan = make_plan(3, tiny_schedule)
        noise = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32))
        z0, eps_list = student_one_pass(tiny_params, noise, plan, Tensor(cond_batch(2)))
        assert len(eps_list) == 3
        np.testing.assert_array_equal(z0.data, combine(noise, eps_list, plan).data)


class TestTrainTeacher:

    def test_tiny_run(self, tiny_run_config, tiny_unet_config, tiny_schedule, tiny_dataset, tmp_path):
        params = UNetParams.init(tiny_unet_config, seed=0)
        initial = params.digest()
        steps = []
        result = train_teacher(tiny_dataset, tiny_run_config.teacher, params, tiny_schedule,
                               on_step=lambda it, loss: steps.append(it), progress_path=tmp_path / "t.csv")
        assert len(result.history) == 3 and all(np.isfinite(result.history))
        assert steps == [0, 1, 2]
        assert result.raw.digest() != initial
        assert result.ema.digest() not in (initial, result.raw.digest())
        with open(tmp_path / "t.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["iteration", "loss"] and len(rows) == 4

    def test_deterministic(self, tiny_run_config, tiny_unet_config, tiny_schedule, tiny_dataset):
        a = train_teacher(tiny_dataset, tiny_run_config.teacher, UNetParams.init(tiny_unet_config), tiny_schedule)
        b = train_teacher(tiny_dataset, tiny_run_config.teacher, UNetParams.init(tiny_unet_config), tiny_schedule)
        assert a.history == b.history
        assert a.ema.digest() == b.ema.digest()

    def test_zero_noise_target_is_learnt(self, tiny_run_config, tiny_unet_config, tiny_schedule, tiny_dataset):
        config = tiny_run_config.teacher.model_copy(update={"iterations": 200, "log_every": 50})
        result = train_teacher(tiny_dataset, config, UNetParams.init(tiny_unet_config, seed=0), tiny_schedule,
                               noise_hook=np.zeros)
        history = np.asarray(result.history)
        assert np.all(history >= 0)
        assert history[-10:].mean() < 0.05 * history[0]

    def test_empty_dataset(self, tiny_run_config, tiny_params, tiny_schedule):
        with pytest.raises(EmptyDataset):
            train_teacher(None, tiny_run_config.teacher, tiny_params, tiny_schedule)

    def test_non_finite_noise(self, tiny_run_config, tiny_unet_config, tiny_schedule, tiny_dataset):
        with pytest.raises(NonFinite):
            train_teacher(tiny_dataset, tiny_run_config.teacher, UNetParams.init(tiny_unet_config), tiny_schedule,
                          noise_hook=lambda shape: np.full(shape, np.inf))


class TestDistillLoop:

    def test_tiny_run_keeps_namespaces_apart(self, tiny_run_config, tiny_params, tiny_schedule, tmp_path):
        config = tiny_run_config.distill.model_copy(update={"check_namespaces": True})
        teacher_digest = tiny_params.digest()
        result = distill_loop(tiny_params, config, tiny_schedule, prompt_set(12), progress_path=tmp_path / "d.csv")
        assert tiny_params.digest() == teacher_digest
        assert result.plan.K == 2
        assert len(result.history) == 2
        assert all(np.isfinite(v) for row in result.history for v in row)
        assert result.student.digest() != teacher_digest
        with open(tmp_path / "d.csv", newline="") as f:
            assert next(csv.reader(f)) == DISTILL_PROGRESS_HEADER

    def test_zero_iterations_keeps_teacher(self, tiny_run_config, tiny_params, tiny_schedule):
        config = tiny_run_config.distill.model_copy(update={"iterations": 0})
        result = distill_loop(tiny_params, config, tiny_schedule, prompt_set(12))
        assert result.ema.digest() == tiny_params.digest()
        assert result.student.digest() == tiny_params.digest()
        assert result.history == []

    def test_kl_off(self, tiny_run_config, tiny_params, tiny_schedule):
        config = tiny_run_config.distill.model_copy(update={"kl_weight": 0.0, "iterations": 1})
        result = distill_loop(tiny_params, config, tiny_schedule, prompt_set(12))
        assert np.isfinite(result.history[0][2])

    def test_deterministic(self, tiny_run_config, tiny_params, tiny_schedule):
        config = tiny_run_config.distill
        a = distill_loop(tiny_params, config, tiny_schedule, prompt_set(12))
        b = distill_loop(tiny_params, config, tiny_schedule, prompt_set(12))
        assert a.history == b.history
        assert a.ema.digest() == b.ema.digest()
