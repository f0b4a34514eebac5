"""
Primitive kernels of the tensor core.

Every primitive is a forward function returning `(output, saved)` and a vector-Jacobian
product mapping the output gradient to one gradient per input (None where an input is
not differentiable). `forward_primitive` is the only place tensors are created from
kernels, and the only place nodes get recorded.
"""
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict

from ..errors import InvalidAttr, ShapeMismatch
from ..logs import error_and_raise
from .tensor import Node, Tensor, current_tape

Forward = Callable[[List[np.ndarray], Dict[str, Any]], Tuple[np.ndarray, Any]]
Backward = Callable[[np.ndarray, List[np.ndarray], np.ndarray, Any, Dict[str, Any]], List[np.ndarray | None]]


class Primitive(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: str
    arity: int  # -1 for variadic
    forward: Forward
    backward: Backward


def _check(cond: bool, msg: str, exc_type=ShapeMismatch):
    if not cond:
        error_and_raise(msg, exc_type)


# conv2d
def _conv(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[2]
    if k == 1:
        out = np.tensordot(x, w[:, :, 0, 0], axes=([1], [1]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_fwd(xs, attrs):
    x, w, b = xs
    _check(x.ndim == 4 and w.ndim == 4, f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    _check(x.shape[1] == w.shape[1], f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    _check(b.shape == (w.shape[0],), f"conv2d bias {b.shape} does not match weight {w.shape}")
    k = w.shape[2]
    _check(w.shape[3] == k, f"conv2d needs square kernels, got {w.shape[2:]}", InvalidAttr)
    _check(attrs.get("stride", 1) == 1, "conv2d only supports stride 1", InvalidAttr)
    pad = attrs.get("padding", (k - 1) // 2)
    _check(0 <= pad <= k - 1, f"conv2d padding {pad} out of range for kernel {k}", InvalidAttr)
    _check(x.shape[2] + 2 * pad >= k and x.shape[3] + 2 * pad >= k, f"conv2d kernel {k} larger than input {x.shape}")
    y = _conv(x, w, pad) + b[None, :, None, None]
    return y, pad


def _conv2d_bwd(g, xs, y, pad, attrs):
    x, w, _ = xs
    k = w.shape[2]
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = _conv(g, w_flip, k - 1 - pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = g.sum(axis=(0, 2, 3))
    return [gx, gw.astype(w.dtype, copy=False), gb]


# linear / matmul
def _linear_fwd(xs, attrs):
    x, w, b = xs
    _check(x.ndim == 2 and w.ndim == 2 and x.shape[1] == w.shape[1],
           f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    _check(b.shape == (w.shape[0],), f"linear bias {b.shape} does not match weight {w.shape}")
    return x @ w.T + b, None


def _linear_bwd(g, xs, y, saved, attrs):
    x, w, _ = xs
    return [g @ w, g.T @ x, g.sum(axis=0)]


def _matmul_fwd(xs, attrs):
    a, b = xs
    _check(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_bwd(g, xs, y, saved, attrs):
    a, b = xs
    return [g @ b.T, a.T @ g]


# group_norm
def _group_norm_fwd(xs, attrs):
    x, gamma, beta = xs
    _check(x.ndim == 4, f"group_norm expects 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    groups = attrs.get("groups")
    _check(isinstance(groups, int) and groups >= 1 and c % groups == 0,
           f"group_norm groups={groups} must divide channels {c}", InvalidAttr)
    _check(gamma.shape == (c,) and beta.shape == (c,), f"group_norm affine shapes {gamma.shape}, {beta.shape} != ({c},)")
    eps = attrs.get("eps", 1e-5)
    xg = x.reshape(bsz, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(x.shape).astype(x.dtype, copy=False)
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, (xhat, inv_std.astype(x.dtype, copy=False))


def _group_norm_bwd(g, xs, y, saved, attrs):
    x, gamma, _ = xs
    xhat, inv_std = saved
    bsz = x.shape[0]
    groups = attrs["groups"]
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    dxhat = (g * gamma[None, :, None, None]).reshape(bsz, groups, -1)
    xh = xhat.reshape(bsz, groups, -1)
    gx = inv_std * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return [gx.reshape(x.shape), ggamma, gbeta]


# elementwise
def _silu_fwd(xs, attrs):
    x = xs[0]
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def _silu_bwd(g, xs, y, sig, attrs):
    x = xs[0]
    return [g * sig * (1.0 + x * (1.0 - sig))]


def _same_shape(xs, kind):
    _check(xs[0].shape == xs[1].shape, f"{kind} shape mismatch: {xs[0].shape} vs {xs[1].shape}")


def _add_fwd(xs, attrs):
    _same_shape(xs, "add")
    return xs[0] + xs[1], None


def _sub_fwd(xs, attrs):
    _same_shape(xs, "sub")
    return xs[0] - xs[1], None


def _mul_fwd(xs, attrs):
    _same_shape(xs, "mul")
    return xs[0] * xs[1], None


def _scalar(attrs, kind) -> float:
    s = attrs.get("scalar")
    _check(isinstance(s, (int, float)) and np.isfinite(s), f"{kind} needs a finite scalar, got {s!r}", InvalidAttr)
    return float(s)


def _mul_scalar_fwd(xs, attrs):
    return xs[0] * xs[0].dtype.type(_scalar(attrs, "mul_scalar")), None


def _add_scalar_fwd(xs, attrs):
    return xs[0] + xs[0].dtype.type(_scalar(attrs, "add_scalar")), None


def _square_fwd(xs, attrs):
    return xs[0] * xs[0], None


def _log_fwd(xs, attrs):
    _check(bool(np.all(xs[0] > 0)), "log of non-positive input", InvalidAttr)
    return np.log(xs[0]), None


def _clamp_min_fwd(xs, attrs):
    floor = attrs.get("floor")
    _check(isinstance(floor, (int, float)), f"clamp_min needs a numeric floor, got {floor!r}", InvalidAttr)
    return np.maximum(xs[0], xs[0].dtype.type(floor)), None


def _clamp_min_bwd(g, xs, y, saved, attrs):
    return [g * (xs[0] >= attrs["floor"])]


def _channel_affine_fwd(xs, attrs):
    x, scale, shift = xs
    _check(x.ndim == 4 and scale.shape == x.shape[:2] and shift.shape == x.shape[:2],
           f"channel_affine shapes {x.shape}, {scale.shape}, {shift.shape}")
    return x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None], None


def _channel_affine_bwd(g, xs, y, saved, attrs):
    x, scale, _ = xs
    return [g * (1.0 + scale[:, :, None, None]), (g * x).sum(axis=(2, 3)), g.sum(axis=(2, 3))]


# layout
def _concat_fwd(xs, attrs):
    _check(len(xs) >= 1, "concat_channels needs at least one input")
    ref = xs[0]
    for x in xs:
        _check(x.ndim == 4 and x.shape[0] == ref.shape[0] and x.shape[2:] == ref.shape[2:],
               f"concat_channels shape mismatch: {[t.shape for t in xs]}")
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def _concat_bwd(g, xs, y, widths, attrs):
    return np.split(g, np.cumsum(widths)[:-1], axis=1)


def _avg_pool2_fwd(xs, attrs):
    x = xs[0]
    _check(x.ndim == 4 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0,
           f"avg_pool2 needs 4-D input with even spatial extents, got {x.shape}")
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), None


def _avg_pool2_bwd(g, xs, y, saved, attrs):
    return [np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25)]


def _upsample_fwd(xs, attrs):
    x = xs[0]
    _check(x.ndim == 4, f"upsample_nearest2 expects 4-D input, got {x.shape}")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), None


def _upsample_bwd(g, xs, y, saved, attrs):
    b, c, h, w = g.shape
    return [g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))]


def _axes(x: np.ndarray, attrs) -> Tuple[int, ...]:
    axes = attrs.get("axes")
    if axes is None:
        return tuple(range(x.ndim))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    _check(all(-x.ndim <= a < x.ndim for a in axes), f"axes {axes} out of range for shape {x.shape}", InvalidAttr)
    return tuple(sorted(a % x.ndim for a in axes))


def _sum_fwd(xs, attrs):
    return np.asarray(xs[0].sum(axis=_axes(xs[0], attrs))), None


def _sum_bwd(g, xs, y, saved, attrs):
    x = xs[0]
    g = np.expand_dims(g, _axes(x, attrs))
    return [np.broadcast_to(g, x.shape).copy()]


def _mean_fwd(xs, attrs):
    return np.asarray(xs[0].mean(axis=_axes(xs[0], attrs))), None


def _mean_bwd(g, xs, y, saved, attrs):
    x = xs[0]
    axes = _axes(x, attrs)
    n = int(np.prod([x.shape[a] for a in axes]))
    g = np.expand_dims(g, axes)
    return [np.broadcast_to(g / x.dtype.type(n), x.shape).copy()]


def _reshape_fwd(xs, attrs):
    x = xs[0]
    shape = tuple(attrs.get("shape", ()))
    _check(int(np.prod(shape)) == x.size and all(s > 0 for s in shape),
           f"cannot reshape {x.shape} into {shape}", InvalidAttr)
    return x.reshape(shape), None


def _reshape_bwd(g, xs, y, saved, attrs):
    return [g.reshape(xs[0].shape)]


PRIMITIVES: Dict[str, Primitive] = {p.kind: p for p in [
    Primitive(kind="conv2d", arity=3, forward=_conv2d_fwd, backward=_conv2d_bwd),
    Primitive(kind="linear", arity=3, forward=_linear_fwd, backward=_linear_bwd),
    Primitive(kind="matmul", arity=2, forward=_matmul_fwd, backward=_matmul_bwd),
    Primitive(kind="group_norm", arity=3, forward=_group_norm_fwd, backward=_group_norm_bwd),
    Primitive(kind="silu", arity=1, forward=_silu_fwd, backward=_silu_bwd),
    Primitive(kind="add", arity=2, forward=_add_fwd, backward=lambda g, xs, y, s, a: [g, g]),
    Primitive(kind="sub", arity=2, forward=_sub_fwd, backward=lambda g, xs, y, s, a: [g, -g]),
    Primitive(kind="mul", arity=2, forward=_mul_fwd, backward=lambda g, xs, y, s, a: [g * xs[1], g * xs[0]]),
    Primitive(kind="mul_scalar", arity=1, forward=_mul_scalar_fwd,
              backward=lambda g, xs, y, s, a: [g * g.dtype.type(a["scalar"])]),
    Primitive(kind="add_scalar", arity=1, forward=_add_scalar_fwd, backward=lambda g, xs, y, s, a: [g]),
    Primitive(kind="square", arity=1, forward=_square_fwd, backward=lambda g, xs, y, s, a: [2 * g * xs[0]]),
    Primitive(kind="log", arity=1, forward=_log_fwd, backward=lambda g, xs, y, s, a: [g / xs[0]]),
    Primitive(kind="clamp_min", arity=1, forward=_clamp_min_fwd, backward=_clamp_min_bwd),
    Primitive(kind="channel_affine", arity=3, forward=_channel_affine_fwd, backward=_channel_affine_bwd),
    Primitive(kind="concat_channels", arity=-1, forward=_concat_fwd, backward=_concat_bwd),
    Primitive(kind="avg_pool2", arity=1, forward=_avg_pool2_fwd, backward=_avg_pool2_bwd),
    Primitive(kind="upsample_nearest2", arity=1, forward=_upsample_fwd, backward=_upsample_bwd),
    Primitive(kind="sum", arity=1, forward=_sum_fwd, backward=_sum_bwd),
    Primitive(kind="mean", arity=1, forward=_mean_fwd, backward=_mean_bwd),
    Primitive(kind="reshape", arity=1, forward=_reshape_fwd, backward=_reshape_bwd),
]}


def forward_primitive(kind: str, inputs: Sequence[Tensor], attrs: Dict[str, Any] | None = None) -> Tensor:
    """
    Apply one primitive. When a tape is active on this thread and some input requires
    gradients, the application is recorded and the output requires gradients too.
    """
    prim = PRIMITIVES.get(kind)
    if prim is None:
        error_and_raise(f"unknown primitive {kind!r}", InvalidAttr)
    if prim.arity >= 0 and len(inputs) != prim.arity:
        error_and_raise(f"{kind} takes {prim.arity} inputs, got {len(inputs)}", InvalidAttr)
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        error_and_raise(f"{kind} got mixed dtypes {sorted(str(d) for d in dtypes)}", ShapeMismatch)

    attrs = dict(attrs or {})
    arrays = [t.data for t in inputs]
    out_arr, saved = prim.forward(arrays, attrs)
    out = Tensor(out_arr, dtype=inputs[0].dtype)

    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True

        def vjp(g: np.ndarray) -> List[np.ndarray | None]:
            grads = prim.backward(g, arrays, out_arr, saved, attrs)
            return [None if gi is None else np.asarray(gi, dtype=out.dtype) for gi in grads]

        out.node = Node(kind, inputs, out, saved, attrs, vjp)
        tape.record(out.node)
    return out


# Functional wrappers used by the model code
def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int | None = None) -> Tensor:
    attrs = {} if padding is None else {"padding": padding}
    return forward_primitive("conv2d", [x, w, b], attrs)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("linear", [x, w, b])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward_primitive("matmul", [a, b])


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    return forward_primitive("group_norm", [x, gamma, beta], {"groups": groups, "eps": eps})


def silu(x: Tensor) -> Tensor:
    return forward_primitive("silu", [x])


def square(x: Tensor) -> Tensor:
    return forward_primitive("square", [x])


def log(x: Tensor) -> Tensor:
    return forward_primitive("log", [x])


def clamp_min(x: Tensor, floor: float) -> Tensor:
    return forward_primitive("clamp_min", [x], {"floor": floor})


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return forward_primitive("channel_affine", [x, scale, shift])


def concat_channels(*xs: Tensor) -> Tensor:
    return forward_primitive("concat_channels", list(xs))


def avg_pool2(x: Tensor) -> Tensor:
    return forward_primitive("avg_pool2", [x])


def upsample_nearest2(x: Tensor) -> Tensor:
    return forward_primitive("upsample_nearest2", [x])


def sum_(x: Tensor, axes=None) -> Tensor:
    return forward_primitive("sum", [x], {"axes": axes})


def mean(x: Tensor, axes=None) -> Tensor:
    return forward_primitive("mean", [x], {"axes": axes})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return forward_primitive("reshape", [x], {"shape": tuple(shape)})
