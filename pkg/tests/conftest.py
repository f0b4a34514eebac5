import numpy as np
import pytest

from tiue.diffusion.schedule import NoiseSchedule
from tiue.diffusion.unet import UNetParams
from tiue.models import RunConfig, ScheduleConfig, TeacherTrainConfig, DistillConfig, ToySpec, UNetConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# Configs
# =============================================================================

@pytest.fixture
def tiny_unet_config() -> UNetConfig:
    """Two levels at 8x8; small enough for finite differences over the whole network."""
    return UNetConfig(image_size=8, base_channels=8, channel_mult=[1, 2], num_res_blocks=1,
                      time_embed_dim=16, cond_dim=12, groups=2)


@pytest.fixture
def tiny_schedule_config() -> ScheduleConfig:
    return ScheduleConfig(T=50)


@pytest.fixture
def tiny_schedule(tiny_schedule_config) -> NoiseSchedule:
    return NoiseSchedule.from_config(tiny_schedule_config)


@pytest.fixture
def tiny_run_config(tiny_unet_config, tiny_schedule_config) -> RunConfig:
    return RunConfig(
        model=tiny_unet_config,
        schedule=tiny_schedule_config,
        data=ToySpec(image_size=8, supersample=2),
        teacher=TeacherTrainConfig(iterations=3, batch=4, dataset_size=24, log_every=1),
        distill=DistillConfig(iterations=2, batch=2, K=2, lora_rank=2, lora_alpha=4.0, log_every=1),
    )


@pytest.fixture
def tiny_params(tiny_unet_config) -> UNetParams:
    return UNetParams.init(tiny_unet_config, seed=3, dtype=np.float32, requires_grad=False)


@pytest.fixture
def tiny_params64(tiny_unet_config) -> UNetParams:
    """float64 weights for gradient verification."""
    return UNetParams.init(tiny_unet_config, seed=3, dtype=np.float64, requires_grad=True)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def cond_batch(tiny_unet_config):
    def make(batch: int, dtype=np.float32, seed: int = 0) -> np.ndarray:
        from tiue.data import prompt_set
        table = prompt_set(tiny_unet_config.cond_dim)
        return table[(np.arange(batch) + seed) % len(table)].astype(dtype)
    return make
