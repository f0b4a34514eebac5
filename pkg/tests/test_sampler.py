import numpy as np
import pytest
from pydantic import ValidationError

from tiue.diffusion.sampler import (SampleRequest, from_pixels, initial_noise, interpolate_conditions, sample,
                                    sample_ddim, sample_loopfree, save_images, seeded_noise, to_pixels)
from tiue.diffusion.schedule import SamplerPlan, make_plan
from tiue.errors import DimMismatch, InvalidPlan, InvalidRange, InvalidSteps
from tiue.models import SampleMode
from tiue.utils import read_ppm


@pytest.fixture
def frozen(tiny_params):
    return tiny_params.frozen()


def _request(cond, mode=SampleMode.LOOPFREE_SEQ, seed=0, plan=None, steps=None, threads=1, **kwargs):
    return SampleRequest(seed=seed, cond=cond, mode=mode, plan=plan, steps=steps, thread_count=threads, **kwargs)


class TestNoise:

    def test_seeded_noise_is_reproducible(self):
        a = seeded_noise(7, 3, (3, 8, 8))
        assert a.tobytes() == seeded_noise(7, 3, (3, 8, 8)).tobytes()
        assert a.tobytes() != seeded_noise(7, 4, (3, 8, 8)).tobytes()
        assert a.tobytes() != seeded_noise(8, 3, (3, 8, 8)).tobytes()

    def test_row_noise_does_not_depend_on_batch(self, frozen, tiny_schedule, cond_batch):
        plan = make_plan(2, tiny_schedule)
        four = initial_noise(_request(cond_batch(4), plan=plan, seed=11), frozen)
        two = initial_noise(_request(cond_batch(2), plan=plan, seed=11), frozen)
        np.testing.assert_array_equal(four[:2], two)

    def test_pinned_noise_indices(self, frozen, tiny_schedule, cond_batch):
        req = _request(cond_batch(3), plan=make_plan(2, tiny_schedule), noise_indices=[0, 0, 0])
        noise = initial_noise(req, frozen)
        np.testing.assert_array_equal(noise[0], noise[2])


class TestLoopFree:

    @pytest.mark.parametrize("seed", [0, 1, 17])
    @pytest.mark.parametrize("threads", [1, 2, 4, 8])
    def test_parallel_matches_sequential(self, frozen, tiny_schedule, cond_batch, seed, threads):
        plan = make_plan(4, tiny_schedule)
        seq = sample_loopfree(frozen, plan, _request(cond_batch(3), seed=seed, plan=plan), return_latent=True)
        par = sample_loopfree(frozen, plan, _request(cond_batch(3), SampleMode.LOOPFREE_PAR, seed=seed, plan=plan,
                                                     threads=threads), return_latent=True)
        assert seq.tobytes() == par.tobytes()

    def test_parallel_matches_sequential_over_many_seeds(self, frozen, tiny_schedule, cond_batch):
        plan = make_plan(4, tiny_schedule)
        for seed in range(100):
            seq = sample_loopfree(frozen, plan, _request(cond_batch(1, seed=seed), seed=seed, plan=plan),
                                  return_latent=True)
            par = sample_loopfree(frozen, plan, _request(cond_batch(1, seed=seed), SampleMode.LOOPFREE_PAR, seed=seed,
                                                         plan=plan, threads=2 + seed % 7), return_latent=True)
            assert seq.tobytes() == par.tobytes(), f"seed {seed}"

    def test_single_step_equals_one_ddim_step(self, frozen, tiny_schedule, cond_batch):
        plan = make_plan(1, tiny_schedule)
        loopfree = sample_loopfree(frozen, plan, _request(cond_batch(2), seed=5, plan=plan), return_latent=True)
        ddim = sample_ddim(frozen, tiny_schedule, 1, _request(cond_batch(2), SampleMode.DDIM, seed=5, steps=1),
                           return_latent=True)
        assert loopfree.tobytes() == ddim.tobytes()

    def test_repeatable(self, frozen, tiny_schedule, cond_batch):
        plan = make_plan(3, tiny_schedule)
        req = _request(cond_batch(2), seed=9, plan=plan)
        assert sample_loopfree(frozen, plan, req).tobytes() == sample_loopfree(frozen, plan, req).tobytes()

    def test_plan_outside_schedule(self, frozen, tiny_schedule, cond_batch):
        plan = SamplerPlan(K=2, timesteps=[80, 10], S=1.0, E=[0.1, 0.2])
        with pytest.raises(InvalidPlan):
            sample_loopfree(frozen, plan, _request(cond_batch(1), plan=plan), sched=tiny_schedule)

    def test_pixels_in_range(self, frozen, tiny_schedule, cond_batch):
        plan = make_plan(2, tiny_schedule)
        pix = sample(frozen, tiny_schedule, _request(cond_batch(2), plan=plan))
        assert pix.dtype == np.uint8 and pix.shape == (2, 8, 8, 3)


class TestDDIM:

    @pytest.mark.parametrize("steps", [0, 51])
    def test_invalid_steps(self, frozen, tiny_schedule, cond_batch, steps):
        with pytest.raises(InvalidSteps):
            sample_ddim(frozen, tiny_schedule, steps, _request(cond_batch(1), SampleMode.DDIM, steps=1))

    def test_dispatch_by_mode(self, frozen, tiny_schedule, cond_batch):
        req = _request(cond_batch(2), SampleMode.DDIM, seed=3, steps=3)
        assert sample(frozen, tiny_schedule, req).tobytes() == sample_ddim(frozen, tiny_schedule, 3, req).tobytes()


class TestGuidance:

    def test_zero_scale_is_unconditional(self, frozen, tiny_schedule, cond_batch):
        cond = cond_batch(2)
        null = np.zeros_like(cond)
        plan = make_plan(3, tiny_schedule)
        guided = sample_loopfree(frozen, plan, _request(cond, seed=2, plan=plan, guidance_scale=0.0),
                                 return_latent=True)
        plain = sample_loopfree(frozen, plan, _request(null, seed=2, plan=plan), return_latent=True)
        assert guided.tobytes() == plain.tobytes()

        guided = sample_ddim(frozen, tiny_schedule, 3, _request(cond, SampleMode.DDIM, seed=2, steps=3,
                                                                guidance_scale=0.0), return_latent=True)
        plain = sample_ddim(frozen, tiny_schedule, 3, _request(null, SampleMode.DDIM, seed=2, steps=3),
                            return_latent=True)
        assert guided.tobytes() == plain.tobytes()

    def test_scale_changes_samples(self, frozen, tiny_schedule, cond_batch):
        plan = make_plan(2, tiny_schedule)
        one = sample_loopfree(frozen, plan, _request(cond_batch(2), plan=plan), return_latent=True)
        more = sample_loopfree(frozen, plan, _request(cond_batch(2), plan=plan, guidance_scale=3.0),
                               return_latent=True)
        assert np.all(np.isfinite(more)) and not np.allclose(one, more)

    @pytest.mark.parametrize("threads", [2, 4])
    def test_guided_parallel_matches_sequential(self, frozen, tiny_schedule, cond_batch, threads):
        plan = make_plan(3, tiny_schedule)
        seq = sample_loopfree(frozen, plan, _request(cond_batch(2), plan=plan, guidance_scale=2.0),
                              return_latent=True)
        par = sample_loopfree(frozen, plan, _request(cond_batch(2), SampleMode.LOOPFREE_PAR, plan=plan,
                                                     threads=threads, guidance_scale=2.0), return_latent=True)
        assert seq.tobytes() == par.tobytes()

    def test_negative_scale_rejected(self, cond_batch, tiny_schedule):
        with pytest.raises(ValidationError):
            _request(cond_batch(1), plan=make_plan(2, tiny_schedule), guidance_scale=-1.0)


class TestRequest:

    def test_ddim_needs_steps(self, cond_batch):
        with pytest.raises(ValidationError):
            SampleRequest(seed=0, cond=cond_batch(1), mode=SampleMode.DDIM)

    def test_loopfree_needs_plan(self, cond_batch):
        with pytest.raises(ValidationError):
            SampleRequest(seed=0, cond=cond_batch(1), mode=SampleMode.LOOPFREE_PAR)

    def test_threads_positive(self, cond_batch, tiny_schedule):
        with pytest.raises(ValidationError):
            _request(cond_batch(1), plan=make_plan(1, tiny_schedule), threads=0)

    def test_noise_indices_length(self, cond_batch, tiny_schedule):
        with pytest.raises(ValidationError):
            _request(cond_batch(2), plan=make_plan(1, tiny_schedule), noise_indices=[0])


class TestInterpolation:

    def test_orthogonal_unit_vectors(self):
        out = interpolate_conditions(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 3)
        np.testing.assert_array_equal(out[0], [1.0, 0.0])
        np.testing.assert_array_equal(out[-1], [0.0, 1.0])
        np.testing.assert_allclose(out[1], [np.sqrt(0.5), np.sqrt(0.5)], rtol=1e-12)

    def test_identical_endpoints(self):
        v = np.array([0.3, -0.4, 1.2])
        for point in interpolate_conditions(v, v, 5):
            np.testing.assert_allclose(point, v, rtol=1e-12)

    def test_zero_vector_falls_back_to_linear(self):
        out = interpolate_conditions(np.zeros(2), np.array([2.0, 0.0]), 3)
        np.testing.assert_allclose(out[1], [1.0, 0.0])

    def test_norm_preserved_for_equal_norms(self, rng):
        a, b = rng.standard_normal(16), rng.standard_normal(16)
        b *= np.linalg.norm(a) / np.linalg.norm(b)
        for point in interpolate_conditions(a, b, 7):
            assert np.linalg.norm(point) == pytest.approx(np.linalg.norm(a), rel=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            interpolate_conditions(np.zeros(3), np.zeros(4), 3)

    def test_needs_two_points(self):
        with pytest.raises(InvalidRange):
            interpolate_conditions(np.ones(3), np.zeros(3), 1)


class TestPixels:

    def test_mapping(self):
        z = np.array([-1.0, 0.0, 1.0, 5.0]).reshape(1, 4, 1, 1)[:, :3]
        pix = to_pixels(z)
        assert pix.shape == (1, 1, 1, 3)
        assert pix[0, 0, 0].tolist() == [0, 128, 255]

    def test_from_pixels_inverts_on_grid(self):
        pix = np.arange(0, 256, dtype=np.uint8)[:12].reshape(1, 2, 2, 3)
        assert to_pixels(from_pixels(pix, dtype=np.float64)).tobytes() == pix.tobytes()

    def test_save_images_names(self, tmp_path):
        pix = np.zeros((3, 4, 4, 3), dtype=np.uint8)
        pix[1] = 200
        paths = save_images(pix, tmp_path / "out", "run1", 7)
        assert [p.name for p in paths] == ["run1_7_0.ppm", "run1_7_1.ppm", "run1_7_2.ppm"]
        np.testing.assert_array_equal(read_ppm(paths[1]), pix[1])
