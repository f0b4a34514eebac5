from .schedule import NoiseSchedule, SamplerPlan, build_schedule, ddim_step, loopfree_coeffs, make_plan, select_timesteps
from .unet import EncoderCache, UNetParams, decode, encode, full_forward, time_embedding
from .lora import LoRAParams, lora_forward
from .sampler import SampleRequest, interpolate_conditions, sample_ddim, sample_loopfree

__all__ = [
    "NoiseSchedule", "SamplerPlan", "build_schedule", "ddim_step", "loopfree_coeffs", "make_plan",
    "select_timesteps",
    "EncoderCache", "UNetParams", "decode", "encode", "full_forward", "time_embedding",
    "LoRAParams", "lora_forward",
    "SampleRequest", "interpolate_conditions", "sample_ddim", "sample_loopfree",
]
