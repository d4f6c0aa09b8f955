"""Parameter initialisers and the small network blocks shared by every model.

Parameters live in flat ``{name: array}`` dicts so that freezing,
checkpointing and optimisation can treat every model the same way. Forward
helpers read them through :func:`param`, which accepts arrays or tensors.
"""

from __future__ import annotations

import math
from typing import Dict, Mapping, Optional

import numpy as np

from .autodiff import Tensor, ops

ParamArrays = Dict[str, np.ndarray]
Params = Mapping[str, "Tensor | np.ndarray"]


def param(params: Params, name: str) -> Tensor:
    p = params[name]
    return p if isinstance(p, Tensor) else Tensor(p)


def init_conv(rng: np.random.Generator, out: ParamArrays, name: str,
              cin: int, cout: int, k: int = 3, gain: float = 1.0) -> None:
    std = gain * math.sqrt(2.0 / (cin * k * k))
    out[f"{name}.w"] = rng.normal(0.0, std, (cout, cin, k, k))
    out[f"{name}.b"] = np.zeros(cout)


def init_linear(rng: np.random.Generator, out: ParamArrays, name: str,
                din: int, dout: int, gain: float = 1.0, bias: bool = True) -> None:
    out[f"{name}.w"] = rng.normal(0.0, gain * math.sqrt(1.0 / din), (din, dout))
    if bias:
        out[f"{name}.b"] = np.zeros(dout)


def init_norm(out: ParamArrays, name: str, channels: int) -> None:
    out[f"{name}.g"] = np.ones(channels)
    out[f"{name}.b"] = np.zeros(channels)


def conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = param(params, f"{name}.w")
    return ops.conv2d(x, w, param(params, f"{name}.b"), stride=stride, padding=w.shape[-1] // 2)


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    y = x @ param(params, f"{name}.w")
    if f"{name}.b" in params:
        y = y + param(params, f"{name}.b")
    return y


def norm2d(params: Params, name: str, x: Tensor) -> Tensor:
    """Per-sample layer norm over (C, H, W) with a per-channel affine map."""
    c = x.shape[1]
    g = ops.reshape(param(params, f"{name}.g"), (1, c, 1, 1))
    b = ops.reshape(param(params, f"{name}.b"), (1, c, 1, 1))
    return ops.layer_norm(x, axis=(1, 2, 3)) * g + b


def norm_tokens(params: Params, name: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, axis=-1) * param(params, f"{name}.g") + param(params, f"{name}.b")


# -- residual block ---------------------------------------------------------

def init_resblock(rng: np.random.Generator, out: ParamArrays, name: str,
                  cin: int, cout: int, temb_dim: Optional[int] = None) -> None:
    init_conv(rng, out, f"{name}.conv1", cin, cout)
    init_norm(out, f"{name}.norm", cout)
    init_conv(rng, out, f"{name}.conv2", cout, cout, gain=0.5)
    if cin != cout:
        init_conv(rng, out, f"{name}.skip", cin, cout, k=1)
    if temb_dim is not None:
        init_linear(rng, out, f"{name}.temb", temb_dim, cout, gain=0.5)


def resblock(params: Params, name: str, x: Tensor, temb: Optional[Tensor] = None) -> Tensor:
    """conv3x3 -> (+time) -> norm -> SiLU -> conv3x3, plus a skip path."""
    h = conv(params, f"{name}.conv1", x)
    if temb is not None:
        t = linear(params, f"{name}.temb", temb)
        h = h + ops.reshape(t, (t.shape[0], t.shape[1], 1, 1))
    h = ops.silu(norm2d(params, f"{name}.norm", h))
    h = conv(params, f"{name}.conv2", h)
    skip = conv(params, f"{name}.skip", x) if f"{name}.skip.w" in params else x
    return skip + h


# -- token attention over spatial positions ---------------------------------

def to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (n, c, h, w))


def init_attention(rng: np.random.Generator, out: ParamArrays, name: str, dim: int,
                   out_gain: float = 0.2) -> None:
    init_norm(out, f"{name}.norm_q", dim)
    init_norm(out, f"{name}.norm_kv", dim)
    for proj in ("q", "k", "v"):
        init_linear(rng, out, f"{name}.{proj}", dim, dim, bias=False)
    init_linear(rng, out, f"{name}.out", dim, dim, gain=out_gain)


def attention_block(params: Params, name: str, query_map: Tensor, context_map: Tensor) -> Tensor:
    """Single-head attention of ``query_map`` positions over ``context_map`` positions.

    Returns the projected attention output only (no residual), as an NCHW map.
    """
    _, _, h, w = query_map.shape
    q_tok = norm_tokens(params, f"{name}.norm_q", to_tokens(query_map))
    kv_tok = norm_tokens(params, f"{name}.norm_kv", to_tokens(context_map))
    attended = ops.attention(
        linear(params, f"{name}.q", q_tok),
        linear(params, f"{name}.k", kv_tok),
        linear(params, f"{name}.v", kv_tok),
    )
    return from_tokens(linear(params, f"{name}.out", attended), h, w)
