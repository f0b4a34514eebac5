import numpy as np
import pytest

from tiue.autograd import Tensor, TapeGraph
from tiue.autograd import primitives as P
from tiue.diffusion.lora import LoRAParams, lora_forward, lora_targets
from tiue.diffusion.unet import full_forward
from tiue.errors import ShapeMismatch, TargetMissing

from .helpers import relative_error


@pytest.fixture
def lora(tiny_params) -> LoRAParams:
    return LoRAParams.init(tiny_params, rank=2, alpha=4.0, seed=1)


def _nonzero_b(lora: LoRAParams, seed: int = 2) -> LoRAParams:
    rng = np.random.default_rng(seed)
    tensors = dict(lora.tensors)
    for name in lora.targets:
        b = tensors[f"{name}.B"]
        tensors[f"{name}.B"] = Tensor(0.1 * rng.standard_normal(b.shape), dtype=b.dtype, requires_grad=True)
    return LoRAParams(rank=lora.rank, alpha=lora.alpha, targets=lora.targets, tensors=tensors)


def test_targets_are_linear_and_pointwise(tiny_params):
    targets = lora_targets(tiny_params)
    assert "time_embed.0.weight" in targets
    assert "cond_embed.weight" in targets
    assert "encoder.down.1.res.0.skip.weight" in targets
    assert "encoder.down.1.res.0.emb_scale.weight" in targets
    assert not any(".conv1." in t or ".conv2." in t or ".norm" in t for t in targets)


def test_init_shapes(lora, tiny_params):
    assert lora.scale == 2.0
    for name in lora.targets:
        out_dim, in_dim = tiny_params[name].shape[:2]
        assert lora.tensors[f"{name}.A"].shape == (2, in_dim)
        assert lora.tensors[f"{name}.B"].shape == (out_dim, 2)
        assert not np.any(lora.tensors[f"{name}.B"].data)


def test_fresh_adapter_is_identity(lora, tiny_params, tiny_unet_config, cond_batch):
    z = np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)
    c = cond_batch(2)
    base = full_forward(tiny_params, z, 25, c).data
    np.testing.assert_array_equal(lora_forward(tiny_params, lora, z, 25, c).data, base)


def test_overlay_leaves_base_untouched(lora, tiny_params):
    before = tiny_params.digest()
    adapted = _nonzero_b(lora).overlay(tiny_params)
    assert tiny_params.digest() == before
    name = lora.targets[0]
    assert adapted[name] is not tiny_params[name]
    untouched = "encoder.conv_in.weight"
    assert adapted[untouched] is tiny_params[untouched]


def test_overlay_adds_scaled_product(lora, tiny_params):
    adapter = _nonzero_b(lora)
    adapted = adapter.overlay(tiny_params)
    name = "cond_embed.weight"
    a = adapter.tensors[f"{name}.A"].data.astype(np.float64)
    b = adapter.tensors[f"{name}.B"].data.astype(np.float64)
    delta = adapted[name].data.astype(np.float64) - tiny_params[name].data
    np.testing.assert_allclose(delta, 2.0 * b @ a, rtol=1e-5, atol=1e-6)


def test_pointwise_conv_delta_reshaped(lora, tiny_params):
    adapted = _nonzero_b(lora).overlay(tiny_params)
    name = "encoder.down.1.res.0.skip.weight"
    assert adapted[name].shape == tiny_params[name].shape


def test_unknown_target(tiny_params):
    with pytest.raises(TargetMissing):
        LoRAParams.init(tiny_params, rank=2, alpha=4.0, targets=["encoder.conv_in.weight"])
    with pytest.raises(TargetMissing):
        LoRAParams.init(tiny_params, rank=2, alpha=4.0, targets=["nope.weight"])


def test_factor_shape_checked(lora, tiny_params):
    tensors = dict(lora.tensors)
    name = lora.targets[0]
    tensors[f"{name}.A"] = Tensor(np.zeros((3, 5), dtype=np.float32))
    broken = LoRAParams(rank=2, alpha=4.0, targets=lora.targets, tensors=tensors)
    with pytest.raises(ShapeMismatch):
        broken.overlay(tiny_params)


def test_array_prefix_round_trip(lora):
    arrays = lora.arrays()
    assert all(k.startswith("lora.") for k in arrays)
    again = LoRAParams.from_arrays(arrays, rank=lora.rank, alpha=lora.alpha)
    assert sorted(again.targets) == sorted(lora.targets)
    for name, t in lora.tensors.items():
        np.testing.assert_array_equal(again.tensors[name].data, t.data)


def test_gradients_reach_both_factors(tiny_params64, tiny_unet_config, cond_batch):
    base = tiny_params64.clone(requires_grad=False)
    lora = _nonzero_b(LoRAParams.init(base, rank=2, alpha=4.0, seed=1))
    z = np.random.default_rng(0).standard_normal((1, 3, 8, 8))
    c = cond_batch(1, dtype=np.float64)
    with TapeGraph() as tape:
        loss = P.mean(P.square(lora_forward(base, lora, z, 10, c)))
    grads = tape.gradients(loss, lora.tensors)
    name = "cond_embed.weight"
    assert np.any(grads[f"{name}.A"].data) and np.any(grads[f"{name}.B"].data)

    # central difference on one entry of B
    b = lora.tensors[f"{name}.B"]
    h = 1e-6
    b.data[0, 0] += h
    fp = float(np.mean(np.square(lora_forward(base, lora, z, 10, c).data)))
    b.data[0, 0] -= 2 * h
    fm = float(np.mean(np.square(lora_forward(base, lora, z, 10, c).data)))
    b.data[0, 0] += h
    assert relative_error(grads[f"{name}.B"].data[0, 0], (fp - fm) / (2 * h)) < 1e-5


def test_frozen_is_read_only(lora):
    frozen = lora.frozen()
    with pytest.raises(ValueError):
        frozen.tensors[f"{lora.targets[0]}.A"].data[0, 0] = 1.0
