"""Noise schedule, forward noising, conditional noise estimator and the implicit sampler.

Schedule arrays are indexed directly by time step: entry ``t`` holds the
value for step ``t`` in ``1..T`` and entry 0 holds the boundary convention
(``alpha_bar[0] == 1``, ``beta[0] == sigma2[0] == 0``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .codec import LatentFeature
from .errors import ConfigError, ContractError, DimensionError
from .layers import (
    ParamArrays,
    Params,
    attention_block,
    conv,
    init_attention,
    init_conv,
    init_linear,
    init_norm,
    init_resblock,
    linear,
    norm2d,
    resblock,
)

EpsFn = Callable[[Tensor, Tensor, Union[int, np.ndarray]], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def check_t(self, t, low: int = 1) -> None:
        ts = np.asarray(t)
        if ts.size == 0 or ts.min() < low or ts.max() > self.T:
            raise ContractError(f"time step {t} outside [{low}, {self.T}]")


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with the derived products and posterior variances."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}", key="T")
    if not 0 < beta_1 <= beta_T < 1:
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}", key="beta_1")
    T = int(T)
    beta = np.concatenate([[0.0], np.linspace(beta_1, beta_T, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma2 = np.zeros(T + 1)
    sigma2[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma2)


def _coef(values: np.ndarray, t, ndim: int):
    """Per-sample schedule coefficient broadcastable against an NCHW batch."""
    if np.ndim(t) == 0:
        return float(values[int(t)])
    return values[np.asarray(t, dtype=int)].reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0, t, eps, sched: NoiseSchedule) -> Tensor:
    """Closed-form draw of x_t given x_0 and the noise ``eps``."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"q_sample: x0 {x0.shape} and noise {eps.shape} differ")
    sched.check_t(t)
    a = _coef(sched.alpha_bar, t, x0.ndim)
    return x0 * np.sqrt(a) + eps * np.sqrt(1.0 - a)


# -- noise estimator --------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 64   # latent channels of x_t and of the condition
    width: int = 64      # U-Net widths are (width, 2 * width)

    def __post_init__(self):
        if self.channels < 1 or self.width < 1:
            raise ConfigError("denoiser channels and width must be positive", key="width")


@dataclass
class DenoiserInput:
    x_t: Tensor
    cond: Tensor
    t: Union[int, np.ndarray]

    def __post_init__(self):
        for name in ("x_t", "cond"):
            v = getattr(self, name)
            if isinstance(v, LatentFeature):
                v = v.tensor
            setattr(self, name, v if isinstance(v, Tensor) else Tensor(v))
        if self.x_t.shape != self.cond.shape:
            raise DimensionError(
                f"denoiser input {self.x_t.shape} and condition {self.cond.shape} differ"
            )
        if np.min(self.t) < 1:
            raise ContractError(f"time step must be >= 1, got {self.t}")


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer time steps, shape ``(N, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def init_denoiser(cfg: DenoiserConfig, rng: np.random.Generator) -> ParamArrays:
    c, w = cfg.channels, cfg.width
    temb = 2 * w
    p: ParamArrays = {}
    init_linear(rng, p, "time.fc1", w, temb)
    init_linear(rng, p, "time.fc2", temb, temb)
    init_conv(rng, p, "in", 2 * c, w)
    init_resblock(rng, p, "down0", w, w, temb)
    init_resblock(rng, p, "down1", w, 2 * w, temb)
    init_resblock(rng, p, "mid", 2 * w, 2 * w, temb)
    init_attention(rng, p, "mid_attn", 2 * w)
    init_resblock(rng, p, "up1", 4 * w, 2 * w, temb)
    init_resblock(rng, p, "up0", 3 * w, w, temb)
    init_norm(p, "out_norm", w)
    init_conv(rng, p, "out", w, c, gain=0.1)
    return p


def denoiser_forward(inp: DenoiserInput, params: Params, cfg: DenoiserConfig) -> Tensor:
    """Predict the noise in ``inp.x_t``; output has the shape of ``x_t``."""
    x, cond = inp.x_t, inp.cond
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise DimensionError(f"denoiser expects {cfg.channels} channels, got input {x.shape}")
    if h % 4 or w % 4:
        raise DimensionError(f"denoiser needs spatial extents divisible by 4, got {x.shape}")
    t = np.broadcast_to(np.asarray(inp.t), (n,))
    emb = Tensor(timestep_embedding(t, cfg.width).astype(x.dtype, copy=False))
    temb = linear(params, "time.fc2", ops.silu(linear(params, "time.fc1", emb)))

    h0 = conv(params, "in", ops.concat([x, cond], axis=1))
    s1 = resblock(params, "down0", h0, temb)
    s2 = resblock(params, "down1", ops.max_pool2d(s1, 2), temb)
    m = resblock(params, "mid", ops.max_pool2d(s2, 2), temb)
    m = m + attention_block(params, "mid_attn", m, m)
    u = resblock(params, "up1", ops.concat([ops.upsample_nearest(m, 2), s2], axis=1), temb)
    u = resblock(params, "up0", ops.concat([ops.upsample_nearest(u, 2), s1], axis=1), temb)
    return conv(params, "out", ops.silu(norm2d(params, "out_norm", u)))


def make_eps_fn(params: Params, cfg: DenoiserConfig) -> EpsFn:
    def eps_fn(x_t, cond, t):
        return denoiser_forward(DenoiserInput(x_t, cond, t), params, cfg)

    return eps_fn


# -- implicit sampling ------------------------------------------------------

def ddim_step(x_t, cond, t: int, t_next: int, eps_fn: EpsFn, sched: NoiseSchedule,
              clip: Optional[Tuple[float, float]] = None) -> Tensor:
    """Deterministic implicit update from step ``t`` to ``t_next`` (0 means the clean estimate).

    With ``clip`` the clean estimate is clamped to ``[lo, hi]`` before it is
    re-noised, which keeps early steps (where ``alpha_bar`` is tiny and any
    noise-estimate error is hugely amplified) inside the data range.
    """
    if not t_next < t:
        raise ContractError(f"t_next ({t_next}) must be smaller than t ({t})")
    sched.check_t(t)
    sched.check_t(t_next, low=0)
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    eps = eps_fn(x_t, cond, t)
    a_t = sched.alpha_bar[t]
    a_next = sched.alpha_bar[t_next]
    x0_hat = (x_t - eps * math.sqrt(1.0 - a_t)) / math.sqrt(a_t)
    if clip is not None:
        lo, hi = clip
        x0_hat = ops.relu(x0_hat - lo) - ops.relu(x0_hat - hi) + lo
    return x0_hat * math.sqrt(a_next) + eps * math.sqrt(1.0 - a_next)


def step_ladder(T: int, S: int) -> List[Tuple[int, int]]:
    """``(t, t_next)`` pairs visited by the S-step sampler, first step first."""
    if S < 1 or T % S:
        raise ConfigError(f"sampling steps S={S} must divide T={T}", key="S")
    stride = T // S
    return [((i - 1) * stride + 1, (i - 2) * stride + 1 if i > 1 else 0) for i in range(S, 0, -1)]


def sample(cond, S: int, eps_fn: EpsFn, sched: NoiseSchedule, seed: int,
           grad_steps: int = 0, clip: Optional[Tuple[float, float]] = None) -> LatentFeature:
    """Run the S-step deterministic sampler from seeded Gaussian noise.

    The last ``grad_steps`` steps are recorded on the active tape (the input
    to the first recorded step is detached) so a loss on the result reaches
    the estimator's parameters; earlier steps run unrecorded. ``clip`` is
    passed to every step.
    """
    c = cond.tensor if isinstance(cond, LatentFeature) else cond
    c = c if isinstance(c, Tensor) else Tensor(c)
    ladder = step_ladder(sched.T, S)
    if not 0 <= grad_steps <= S:
        raise ConfigError(f"grad_steps must lie in [0, {S}], got {grad_steps}", key="scc_grad_steps")
    split = S - grad_steps
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(c.shape).astype(c.dtype, copy=False))
    with no_grad():
        for t, t_next in ladder[:split]:
            x = ddim_step(x, c, t, t_next, eps_fn, sched, clip)
    x = ops.detach(x)
    for t, t_next in ladder[split:]:
        x = ddim_step(x, c, t, t_next, eps_fn, sched, clip)
    return LatentFeature(x, "restored")
