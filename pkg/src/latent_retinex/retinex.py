"""Retinex decomposition of latent feature maps.

``init_decompose`` gives the closed-form max-channel initialisation,
``ctdn_forward`` refines it with the content-transfer decomposition network
(two convolutional embeddings, a cross-attention that lets the illumination
branch reinforce the reflectance, and a self-attention that pulls residual
content out of the illumination).

All maps are NCHW: reflectance has C channels, illumination has one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, DimensionError, DomainError
from .layers import ParamArrays, Params, attention_block, conv, init_attention, init_conv


@dataclass(frozen=True)
class RetinexConfig:
    tau: float = 1e-4
    gamma: float = 0.2
    sharpness: float = 20.0  # softplus beta on the illumination output

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}", key="tau")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}", key="gamma")
        if not self.sharpness > 0:
            raise ConfigError(f"sharpness must be positive, got {self.sharpness}", key="sharpness")


@dataclass
class RetinexPair:
    reflectance: Tensor   # (N, C, h, w)
    illumination: Tensor  # (N, 1, h, w)

    @property
    def R(self) -> Tensor:
        return self.reflectance

    @property
    def L(self) -> Tensor:
        return self.illumination


def _as_tensor(f) -> Tensor:
    if hasattr(f, "tensor"):
        f = f.tensor
    return f if isinstance(f, Tensor) else Tensor(f)


def init_decompose(feature, tau: float = 1e-4) -> RetinexPair:
    """Illumination = channel max, reflectance = feature / (illumination + tau)."""
    f = _as_tensor(feature)
    if f.ndim != 4:
        raise DimensionError(f"init_decompose expects an NCHW feature, got {f.shape}")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}", key="tau")
    illum = ops.max(f, axis=1, keepdims=True)
    return RetinexPair(f / (illum + tau), illum)


def recompose(pair: RetinexPair) -> Tensor:
    """Channel-broadcast product reflectance * illumination."""
    r, l = pair.reflectance, pair.illumination
    if r.ndim != 4 or l.ndim != 4 or l.shape[1] != 1 or r.shape[0] != l.shape[0] or r.shape[2:] != l.shape[2:]:
        raise DimensionError(f"recompose: reflectance {r.shape} and illumination {l.shape} do not align")
    return r * l


def gamma_correct(illumination, gamma: float) -> Tensor:
    """Elementwise ``L ** gamma``; negative illumination is rejected."""
    l = _as_tensor(illumination)
    if np.any(l.data < 0):
        raise DomainError("gamma_correct needs nonnegative illumination")
    return ops.pow(l, gamma)


# -- content-transfer decomposition network ---------------------------------

def _init_convs(rng, p: ParamArrays, name: str, cin: int, cout: int, branch_gain: float = 0.5):
    init_conv(rng, p, f"{name}.conv1", cin, cout)
    init_conv(rng, p, f"{name}.conv2", cout, cout, gain=branch_gain)
    if cin != cout:
        init_conv(rng, p, f"{name}.skip", cin, cout, k=1)


def _convs(params: Params, name: str, x: Tensor) -> Tensor:
    h = conv(params, f"{name}.conv2", ops.silu(conv(params, f"{name}.conv1", x)))
    skip = conv(params, f"{name}.skip", x) if f"{name}.skip.w" in params else x
    return skip + h


def init_ctdn(channels: int, rng: np.random.Generator) -> ParamArrays:
    """Random residual branches around an illumination path that starts as a copy.

    The 1 -> C embedding copies the illumination into every channel and the
    C -> 1 head averages it back, so training starts near the closed-form
    decomposition instead of a random (and possibly dead) illumination.
    """
    p: ParamArrays = {}
    _init_convs(rng, p, "embed_r", channels, channels)
    _init_convs(rng, p, "embed_l", 1, channels)
    init_attention(rng, p, "cross", channels)
    init_attention(rng, p, "self", channels)
    _init_convs(rng, p, "out_r", channels, channels)
    _init_convs(rng, p, "out_l", channels, 1)
    p["embed_l.skip.w"] = np.ones((channels, 1, 1, 1))
    p["out_l.skip.w"] = np.full((1, channels, 1, 1), 1.0 / channels)
    return p


def identity_ctdn(channels: int, rng: np.random.Generator) -> ParamArrays:
    """Parameters under which the network reproduces ``init_decompose``.

    Residual branches and attention output projections are zeroed; only the
    final softplus deviates from the identity.
    """
    p = init_ctdn(channels, rng)
    for key in p:
        if ".conv2." in key or key.startswith(("cross.out", "self.out")):
            p[key] = np.zeros_like(p[key])
    return p


def ctdn_forward(feature, params: Params, cfg: RetinexConfig = RetinexConfig()) -> RetinexPair:
    f = _as_tensor(feature)
    init = init_decompose(f, cfg.tau)
    r1 = _convs(params, "embed_r", init.reflectance)
    l1 = _convs(params, "embed_l", init.illumination)
    r2 = r1 + attention_block(params, "cross", r1, l1)
    l2 = attention_block(params, "self", l1, l1)
    r = _convs(params, "out_r", r2 + l2)
    l = ops.softplus(_convs(params, "out_l", l1 - l2), beta=cfg.sharpness)
    return RetinexPair(r, l)
