"""
Conditional epsilon-prediction UNet with an explicit encoder/decoder boundary.

Parameter namespace (levels l = 0..L-1, resblocks i):

    time_embed.0.{weight,bias}          sinusoid(base_channels) -> time_embed_dim
    time_embed.1.{weight,bias}          time_embed_dim -> time_embed_dim
    cond_embed.{weight,bias}            cond_dim -> time_embed_dim
    encoder.conv_in.{weight,bias}
    encoder.down.{l}.res.{i}.<block>
    encoder.mid.res.{0,1}.<block>
    decoder.up.{l}.res.{i}.<block>      i = 0..num_res_blocks
    decoder.up.{l}.upsample.conv.{weight,bias}   for l > 0
    decoder.norm_out.{weight,bias}
    decoder.conv_out.{weight,bias}

    <block> = norm1.{weight,bias} conv1.{weight,bias} emb_scale.{weight,bias} emb_shift.{weight,bias}
              norm2.{weight,bias} conv2.{weight,bias} [skip.{weight,bias} when channels change]

The mid block belongs to the encoder. Time embedding and the projected condition are
summed and injected into every resblock through a per-channel scale and shift.
"""
from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..autograd import Tensor
from ..autograd import primitives as P
from ..errors import CacheMismatch, InvalidTimestep, ShapeMismatch
from ..logs import error_and_raise
from ..models.config_models import UNetConfig
from ..utils import array_digest

MID_BLOCKS = 2


class UNetParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: UNetConfig
    tensors: Dict[str, Tensor]

    @staticmethod
    def init(config: UNetConfig, seed: int = 0, dtype=np.float32, requires_grad: bool = True) -> "UNetParams":
        rng = np.random.default_rng(seed)
        tensors: Dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config):
            if name.endswith(".bias"):
                arr = np.zeros(shape)
            elif ".norm" in name and name.endswith(".weight"):
                arr = np.ones(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                arr = rng.standard_normal(shape) / np.sqrt(fan_in)
            tensors[name] = Tensor(arr, dtype=dtype, requires_grad=requires_grad, name=name)
        return UNetParams(config=config, tensors=tensors)

    @staticmethod
    def from_arrays(config: UNetConfig, arrays: Mapping[str, np.ndarray], requires_grad: bool = False,
                    dtype=None) -> "UNetParams":
        expected = dict(parameter_shapes(config))
        missing = [n for n in expected if n not in arrays]
        if missing:
            error_and_raise(f"parameters missing for this UNet config: {missing[:5]}", ShapeMismatch)
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                error_and_raise(f"parameter {name} has shape {arr.shape}, expected {shape}", ShapeMismatch)
            tensors[name] = Tensor(arr.copy(), dtype=dtype or arr.dtype, requires_grad=requires_grad, name=name)
        return UNetParams(config=config, tensors=tensors)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def clone(self, requires_grad: bool | None = None) -> "UNetParams":
        return UNetParams(config=self.config, tensors={
            n: Tensor(t.data.copy(), dtype=t.dtype, name=n,
                      requires_grad=t.requires_grad if requires_grad is None else requires_grad)
            for n, t in self.tensors.items()
        })

    def frozen(self) -> "UNetParams":
        """Read-only copy for inference; safe to share between threads."""
        out = self.clone(requires_grad=False)
        for t in out.tensors.values():
            t.data.setflags(write=False)
        return out

    def with_overrides(self, overrides: Mapping[str, Tensor]) -> "UNetParams":
        """A view where some names resolve to other tensors. Base tensors are shared, never copied."""
        return UNetParams(config=self.config, tensors={**self.tensors, **overrides})

    def digest(self) -> str:
        return array_digest(self.arrays())


def _block_shapes(prefix: str, c_in: int, c_out: int, temb: int) -> List[Tuple[str, tuple]]:
    shapes = [
        (f"{prefix}.norm1.weight", (c_in,)), (f"{prefix}.norm1.bias", (c_in,)),
        (f"{prefix}.conv1.weight", (c_out, c_in, 3, 3)), (f"{prefix}.conv1.bias", (c_out,)),
        (f"{prefix}.emb_scale.weight", (c_out, temb)), (f"{prefix}.emb_scale.bias", (c_out,)),
        (f"{prefix}.emb_shift.weight", (c_out, temb)), (f"{prefix}.emb_shift.bias", (c_out,)),
        (f"{prefix}.norm2.weight", (c_out,)), (f"{prefix}.norm2.bias", (c_out,)),
        (f"{prefix}.conv2.weight", (c_out, c_out, 3, 3)), (f"{prefix}.conv2.bias", (c_out,)),
    ]
    if c_in != c_out:
        shapes += [(f"{prefix}.skip.weight", (c_out, c_in, 1, 1)), (f"{prefix}.skip.bias", (c_out,))]
    return shapes


def skip_layout(config: UNetConfig) -> List[Tuple[int, int]]:
    """(channels, resolution) of every skip the encoder emits, in push order."""
    chans = config.level_channels
    res = config.image_size
    layout = [(chans[0], res)]
    for level, ch in enumerate(chans):
        layout += [(ch, res)] * config.num_res_blocks
        if level != config.levels - 1:
            res //= 2
            layout.append((ch, res))
    return layout


def parameter_shapes(config: UNetConfig) -> List[Tuple[str, tuple]]:
    temb, base = config.time_embed_dim, config.base_channels
    chans = config.level_channels
    shapes = [
        ("time_embed.0.weight", (temb, base)), ("time_embed.0.bias", (temb,)),
        ("time_embed.1.weight", (temb, temb)), ("time_embed.1.bias", (temb,)),
        ("cond_embed.weight", (temb, config.cond_dim)), ("cond_embed.bias", (temb,)),
        ("encoder.conv_in.weight", (chans[0], config.in_channels, 3, 3)), ("encoder.conv_in.bias", (chans[0],)),
    ]
    ch = chans[0]
    for level, c_out in enumerate(chans):
        for i in range(config.num_res_blocks):
            shapes += _block_shapes(f"encoder.down.{level}.res.{i}", ch, c_out, temb)
            ch = c_out
    for i in range(MID_BLOCKS):
        shapes += _block_shapes(f"encoder.mid.res.{i}", ch, ch, temb)

    skips = [c for c, _ in skip_layout(config)]
    for level in reversed(range(config.levels)):
        c_out = chans[level]
        for i in range(config.num_res_blocks + 1):
            shapes += _block_shapes(f"decoder.up.{level}.res.{i}", ch + skips.pop(), c_out, temb)
            ch = c_out
        if level != 0:
            shapes += [(f"decoder.up.{level}.upsample.conv.weight", (ch, ch, 3, 3)),
                       (f"decoder.up.{level}.upsample.conv.bias", (ch,))]
    shapes += [
        ("decoder.norm_out.weight", (ch,)), ("decoder.norm_out.bias", (ch,)),
        ("decoder.conv_out.weight", (config.out_channels, ch, 3, 3)), ("decoder.conv_out.bias", (config.out_channels,)),
    ]
    return shapes


class EncoderCache(BaseModel):
    """Encoder output at the key step. Decoders only read it."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    skips: Tuple[Tensor, ...]
    mid: Tensor
    key_step: int | Tuple[int, ...]
    cond: np.ndarray

    @model_validator(mode="after")
    def lock_buffers(self) -> "EncoderCache":
        for t in (*self.skips, self.mid):
            t.data.setflags(write=False)
        self.cond.setflags(write=False)
        return self

    def digest(self) -> str:
        arrays = {f"skip.{i}": s.data for i, s in enumerate(self.skips)}
        arrays["mid"] = self.mid.data
        arrays["cond"] = self.cond
        return array_digest(arrays)


def sinusoid(t, dim: int, batch: int, dtype=np.float32) -> np.ndarray:
    """[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})] with a geometric frequency ladder."""
    half = dim // 2
    ts = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
    freqs = np.exp(-np.log(10_000.0) * np.arange(half, dtype=np.float64) / half)
    args = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def time_embedding(params: UNetParams, t, batch: int = 1) -> Tensor:
    """Sinusoid of `t` through the two-layer time MLP. `t` is an index or one index per batch item."""
    if np.any(np.asarray(t) < 0):
        error_and_raise(f"timestep must be non-negative, got {t}", InvalidTimestep)
    s = Tensor(sinusoid(t, params.config.base_channels, batch, params.dtype))
    h = P.silu(P.linear(s, params["time_embed.0.weight"], params["time_embed.0.bias"]))
    return P.linear(h, params["time_embed.1.weight"], params["time_embed.1.bias"])


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _embedding(params: UNetParams, t, cond: Tensor) -> Tensor:
    """silu(time embedding + projected condition), shared by all resblocks of one pass."""
    emb = time_embedding(params, t, cond.shape[0])
    c = P.linear(cond, params["cond_embed.weight"], params["cond_embed.bias"])
    return P.silu(emb + c)


def _resblock(params: UNetParams, prefix: str, h: Tensor, emb: Tensor) -> Tensor:
    groups = params.config.groups
    x = P.silu(P.group_norm(h, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"], groups))
    x = P.conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"])
    scale = P.linear(emb, params[f"{prefix}.emb_scale.weight"], params[f"{prefix}.emb_scale.bias"])
    shift = P.linear(emb, params[f"{prefix}.emb_shift.weight"], params[f"{prefix}.emb_shift.bias"])
    x = P.group_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"], groups)
    x = P.silu(P.channel_affine(x, scale, shift))
    x = P.conv2d(x, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"])
    if f"{prefix}.skip.weight" in params:
        h = P.conv2d(h, params[f"{prefix}.skip.weight"], params[f"{prefix}.skip.bias"], padding=0)
    return h + x


def _check_inputs(params: UNetParams, z: Tensor, cond: Tensor):
    cfg = params.config
    if z.ndim != 4 or z.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        error_and_raise(f"expected input (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {z.shape}",
                        ShapeMismatch)
    if cond.shape != (z.shape[0], cfg.cond_dim):
        error_and_raise(f"expected condition ({z.shape[0]}, {cfg.cond_dim}), got {cond.shape}", ShapeMismatch)


def _step_key(t) -> int | Tuple[int, ...]:
    arr = np.asarray(t)
    return int(arr) if arr.ndim == 0 else tuple(int(v) for v in arr.reshape(-1))


def encode(params: UNetParams, z, t_enc, cond) -> EncoderCache:
    z, cond = _as_tensor(z, params.dtype), _as_tensor(cond, params.dtype)
    _check_inputs(params, z, cond)
    cfg = params.config
    emb = _embedding(params, t_enc, cond)

    h = P.conv2d(z, params["encoder.conv_in.weight"], params["encoder.conv_in.bias"])
    skips = [h]
    for level in range(cfg.levels):
        for i in range(cfg.num_res_blocks):
            h = _resblock(params, f"encoder.down.{level}.res.{i}", h, emb)
            skips.append(h)
        if level != cfg.levels - 1:
            h = P.avg_pool2(h)
            skips.append(h)
    for i in range(MID_BLOCKS):
        h = _resblock(params, f"encoder.mid.res.{i}", h, emb)
    return EncoderCache(skips=tuple(skips), mid=h, key_step=_step_key(t_enc), cond=cond.data.copy())


def _check_cache(params: UNetParams, cache: EncoderCache, cond: Tensor):
    batch = cache.mid.shape[0]
    layout = skip_layout(params.config)
    if len(cache.skips) != len(layout):
        error_and_raise(f"cache has {len(cache.skips)} skips, decoder expects {len(layout)}", CacheMismatch)
    for i, (skip, (ch, res)) in enumerate(zip(cache.skips, layout)):
        if skip.shape != (batch, ch, res, res):
            error_and_raise(f"skip {i} has shape {skip.shape}, decoder expects {(batch, ch, res, res)}",
                            CacheMismatch)
    if cond.shape != cache.cond.shape or not np.array_equal(cond.data, cache.cond):
        error_and_raise("decode condition differs from the condition the cache was encoded with", CacheMismatch)


def decode(params: UNetParams, cache: EncoderCache, t_dec, cond, return_hidden: bool = False):
    """
    Predict noise at step `t_dec` from cached encoder features.
    With `return_hidden`, also returns the activation right before the output convolution.
    """
    cond = _as_tensor(cond, params.dtype)
    _check_cache(params, cache, cond)
    cfg = params.config
    emb = _embedding(params, t_dec, cond)

    skips = list(cache.skips)
    h = cache.mid
    for level in reversed(range(cfg.levels)):
        for i in range(cfg.num_res_blocks + 1):
            h = P.concat_channels(h, skips.pop())
            h = _resblock(params, f"decoder.up.{level}.res.{i}", h, emb)
        if level != 0:
            h = P.upsample_nearest2(h)
            h = P.conv2d(h, params[f"decoder.up.{level}.upsample.conv.weight"],
                         params[f"decoder.up.{level}.upsample.conv.bias"])
    hidden = P.silu(P.group_norm(h, params["decoder.norm_out.weight"], params["decoder.norm_out.bias"], cfg.groups))
    out = P.conv2d(hidden, params["decoder.conv_out.weight"], params["decoder.conv_out.bias"])
    if return_hidden:
        return out, hidden
    return out


def full_forward(params: UNetParams, z, t, cond) -> Tensor:
    return decode(params, encode(params, z, t, cond), t, cond)
