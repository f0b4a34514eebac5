import numpy as np
import pytest

from tiue.autograd import Tensor
from tiue.constant import TERMINAL_INDEX
from tiue.diffusion.schedule import (NoiseSchedule, SamplerPlan, _ddim_coeffs, build_schedule, combine, ddim_step,
                                     loopfree_coeffs, make_plan, select_timesteps)
from tiue.errors import InvalidK, InvalidRange, InvalidTimestep, ShapeMismatch


def _random_schedule(rng: np.random.Generator, T: int) -> NoiseSchedule:
    betas = rng.uniform(1e-4, 0.2, size=T)
    return NoiseSchedule.from_betas(betas)


def _sequential(z: np.ndarray, eps_list, plan: SamplerPlan, sched: NoiseSchedule) -> np.ndarray:
    chain = plan.timesteps + [plan.terminal_index]
    for eps, t, t_prev in zip(eps_list, chain, chain[1:]):
        z = ddim_step(z, eps, t, t_prev, sched)
    return z


class TestBuildSchedule:

    def test_single_step(self):
        sched = build_schedule(1, 0.1, 0.1, "linear")
        np.testing.assert_allclose(sched.alpha_bars, [0.9])

    def test_constant_betas(self):
        sched = build_schedule(3, 0.5, 0.5, "linear")
        np.testing.assert_allclose(sched.alpha_bars, [0.5, 0.25, 0.125], rtol=1e-15)

    def test_linear_default_range(self):
        sched = build_schedule(1000, 1e-4, 0.02, "linear")
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert sched.alpha_bars[0] == pytest.approx(0.9999, rel=1e-12)

    def test_scaled_linear(self):
        sched = build_schedule(10, 8.5e-4, 1.2e-2, "scaled_linear")
        root = np.sqrt(sched.betas)
        np.testing.assert_allclose(np.diff(root), np.diff(root)[0], rtol=1e-9)
        assert sched.betas[0] == pytest.approx(8.5e-4) and sched.betas[-1] == pytest.approx(1.2e-2)

    def test_final_alpha_is_first_entry(self):
        sched = build_schedule(100, 1e-3, 2e-2, "linear")
        assert sched.alpha_bar(TERMINAL_INDEX) == pytest.approx(1 - 1e-3)
        assert sched.alpha_bar(0) == sched.alpha_bar_final

    @pytest.mark.parametrize("T, start, end", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_invalid_range(self, T, start, end):
        with pytest.raises(InvalidRange):
            build_schedule(T, start, end)

    def test_index_out_of_range(self):
        with pytest.raises(InvalidTimestep):
            build_schedule(10, 0.1, 0.1).alpha_bar(10)

    def test_arrays_read_only(self):
        sched = build_schedule(5, 0.1, 0.2)
        with pytest.raises(ValueError):
            sched.alpha_bars[0] = 0.5


class TestDDIMStep:

    def test_equal_alphas_is_identity(self):
        sched = NoiseSchedule.from_alpha_bars(np.array([0.5, 0.5, 0.3]))
        z, eps = np.array([1.5, -2.0]), np.array([0.3, 0.7])
        np.testing.assert_array_equal(ddim_step(z, eps, 1, 0, sched), z)

    def test_hand_values(self):
        a, b = _ddim_coeffs(0.25, 1.0)
        assert a * 1.0 + b * 0.0 == pytest.approx(2.0)

        sched = NoiseSchedule.from_alpha_bars(np.array([0.64, 0.25]))
        out = ddim_step(np.array([1.0]), np.array([1.0]), 1, 0, sched)
        assert out[0] == pytest.approx(1.6 + 0.8 * (np.sqrt(0.5625) - np.sqrt(3.0)), rel=1e-12)

    def test_linear_in_inputs(self, rng):
        sched = build_schedule(100, 1e-3, 2e-2)
        z, eps = rng.standard_normal(10), rng.standard_normal(10)
        np.testing.assert_allclose(ddim_step(3.0 * z, 3.0 * eps, 80, 40, sched),
                                   3.0 * ddim_step(z, eps, 80, 40, sched), rtol=1e-12)

    def test_tensor_and_array_agree(self, rng):
        sched = build_schedule(100, 1e-3, 2e-2)
        z, eps = rng.standard_normal((2, 3)).astype(np.float32), rng.standard_normal((2, 3)).astype(np.float32)
        out_t = ddim_step(Tensor(z), Tensor(eps), 50, 10, sched)
        np.testing.assert_array_equal(out_t.data, ddim_step(z, eps, 50, 10, sched))

    def test_shape_mismatch(self):
        sched = build_schedule(10, 0.1, 0.1)
        with pytest.raises(ShapeMismatch):
            ddim_step(np.zeros(3), np.zeros(4), 5, 2, sched)

    def test_wrong_direction(self):
        sched = build_schedule(10, 0.01, 0.1)
        with pytest.raises(InvalidTimestep):
            ddim_step(np.zeros(3), np.zeros(3), 2, 5, sched)


class TestSelectTimesteps:

    def test_trailing(self):
        assert select_timesteps(4, 1000) == ([999, 749, 499, 249], TERMINAL_INDEX)
        assert select_timesteps(1, 1000)[0] == [999]
        assert select_timesteps(7, 7)[0] == [6, 5, 4, 3, 2, 1, 0]

    def test_leading(self):
        assert select_timesteps(4, 1000, "leading")[0] == [750, 500, 250, 0]

    @pytest.mark.parametrize("K", [1, 3, 8, 13, 50])
    def test_strictly_decreasing(self, K):
        steps, _ = select_timesteps(K, 50)
        assert len(steps) == K and all(a > b for a, b in zip(steps, steps[1:]))
        assert steps[0] == 49 and steps[-1] >= 0

    @pytest.mark.parametrize("K", [0, 11])
    def test_invalid_k(self, K):
        with pytest.raises(InvalidK):
            select_timesteps(K, 10)


class TestLoopFreeCoeffs:

    def test_single_step_is_ddim_bit_exact(self, rng):
        sched = build_schedule(1000, 8.5e-4, 1.2e-2)
        plan = make_plan(1, sched)
        for dtype in (np.float32, np.float64):
            z, eps = rng.standard_normal((2, 3, 4, 4)).astype(dtype), rng.standard_normal((2, 3, 4, 4)).astype(dtype)
            expected = ddim_step(z, eps, plan.timesteps[0], plan.terminal_index, sched)
            assert combine(z, [eps], plan).tobytes() == expected.tobytes()
            out_t = combine(Tensor(z), [Tensor(eps)], plan)
            assert out_t.data.tobytes() == ddim_step(Tensor(z), Tensor(eps), plan.timesteps[0],
                                                     plan.terminal_index, sched).data.tobytes()

    def test_default_schedule_k4(self, rng):
        sched = build_schedule(1000, 8.5e-4, 1.2e-2)
        plan = make_plan(4, sched)
        z = rng.standard_normal(64)
        eps_list = [rng.standard_normal(64) for _ in range(4)]
        seq = _sequential(z, eps_list, plan, sched)
        rel = np.linalg.norm(combine(z, eps_list, plan) - seq) / np.linalg.norm(seq)
        assert rel < 1e-5

    def test_telescoping_on_random_schedules(self, rng):
        for trial in range(100):
            T = int(rng.integers(8, 200))
            sched = _random_schedule(rng, T)
            K = int(rng.integers(1, 9))
            plan = make_plan(K, sched, "trailing" if trial % 2 == 0 else "leading")
            for dtype, tol in ((np.float64, 1e-10), (np.float32, 1e-5)):
                z = rng.standard_normal(32).astype(dtype)
                eps_list = [rng.standard_normal(32).astype(dtype) for _ in range(K)]
                seq = _sequential(z.astype(np.float64), [e.astype(np.float64) for e in eps_list], plan, sched)
                closed = combine(z, eps_list, plan).astype(np.float64)
                assert np.linalg.norm(closed - seq) / np.linalg.norm(seq) < tol

    def test_constant_schedule(self):
        sched = NoiseSchedule.from_alpha_bars(np.full(10, 0.4))
        plan = loopfree_coeffs([9, 6, 3], TERMINAL_INDEX, sched)
        assert plan.S == 1.0
        assert all(e == 0.0 for e in plan.E)

    def test_scale_factor(self):
        sched = build_schedule(100, 1e-3, 2e-2)
        plan = make_plan(5, sched)
        assert plan.S == pytest.approx(np.sqrt(sched.alpha_bar_final / sched.alpha_bar(plan.timesteps[0])))

    def test_non_decreasing_timesteps_rejected(self):
        sched = build_schedule(100, 1e-3, 2e-2)
        with pytest.raises(InvalidTimestep):
            loopfree_coeffs([10, 30], TERMINAL_INDEX, sched)
        with pytest.raises(InvalidTimestep):
            loopfree_coeffs([], TERMINAL_INDEX, sched)

    def test_plan_serializes(self):
        plan = make_plan(3, build_schedule(100, 1e-3, 2e-2))
        again = SamplerPlan(**plan.model_dump(mode="json"))
        assert again == plan
