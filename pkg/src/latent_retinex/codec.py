"""Image encoder and decoder between RGB images and latent feature maps.

The encoder stacks ``k`` residual stages, each followed by 2x max-pooling,
then projects to ``channels`` latent channels with a 1x1 convolution and a
sigmoid. That code is scaled by a local brightness map (max over RGB,
max-pooled to the latent grid), so a darker exposure of the same scene gives
a proportionally smaller feature and the channel-max illumination of the
Retinex split follows scene brightness. The decoder mirrors it with nearest-neighbour upsampling and ends in
a sigmoid so reconstructed pixels stay inside (0, 1).

Images are ``(H, W, 3)`` or ``(N, H, W, 3)`` arrays at the public surface;
latent maps are carried as NCHW tensors inside :class:`LatentFeature`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, ContractError, DimensionError
from .layers import ParamArrays, Params, conv, init_conv, init_resblock, resblock

PROVENANCES = ("low", "high", "restored")
LATENT_RANGE = (0.0, 1.0)  # sigmoid code times a brightness in [0, 1]


@dataclass(frozen=True)
class CodecConfig:
    k: int = 3
    channels: int = 64
    base_width: int = 16

    def __post_init__(self):
        if not 0 <= self.k <= 4:
            raise ConfigError(f"k must lie in [0, 4], got {self.k}", key="k")
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}", key="channels")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be positive, got {self.base_width}", key="base_width")

    @property
    def widths(self) -> List[int]:
        """Channel width of each encoder stage (doubling, capped at ``channels``)."""
        return [min(self.base_width * 2 ** i, self.channels) for i in range(self.k)]

    @property
    def factor(self) -> int:
        return 2 ** self.k

    def latent_hw(self, height: int, width: int):
        if height % self.factor or width % self.factor:
            raise DimensionError(
                f"image size {height}x{width} is not divisible by 2^k = {self.factor}"
            )
        return height // self.factor, width // self.factor


@dataclass
class LatentFeature:
    """Encoded feature map; ``tensor`` is NCHW with C latent channels."""

    tensor: Tensor
    provenance: str = "low"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        if not isinstance(self.tensor, Tensor):
            self.tensor = Tensor(self.tensor)
        if self.tensor.ndim != 4:
            raise DimensionError(f"latent feature must be NCHW, got shape {self.tensor.shape}")

    @property
    def shape(self):
        return self.tensor.shape

    def hwc(self) -> np.ndarray:
        """Channel-last view ``(N, h, w, C)``."""
        return self.tensor.data.transpose(0, 2, 3, 1)


def init_encoder(cfg: CodecConfig, rng: np.random.Generator) -> ParamArrays:
    p: ParamArrays = {}
    cin = 3
    for i, width in enumerate(cfg.widths):
        init_resblock(rng, p, f"stage{i}", cin, width)
        cin = width
    init_conv(rng, p, "proj", cin, cfg.channels, k=1)
    return p


def init_decoder(cfg: CodecConfig, rng: np.random.Generator) -> ParamArrays:
    p: ParamArrays = {}
    widths = cfg.widths
    top = widths[-1] if widths else cfg.channels
    init_conv(rng, p, "proj", cfg.channels, top, k=1)
    for i in reversed(range(cfg.k)):
        init_resblock(rng, p, f"stage{i}", widths[i], widths[i - 1] if i > 0 else widths[0])
    init_conv(rng, p, "head", widths[0] if widths else top, 3, k=3)
    return p


def encoder_forward(x: Tensor, cfg: CodecConfig, params: Params) -> Tensor:
    """NCHW image batch -> NCHW latent map."""
    cfg.latent_hw(x.shape[2], x.shape[3])
    h = x
    for i in range(cfg.k):
        h = ops.max_pool2d(resblock(params, f"stage{i}", h), 2)
    return ops.sigmoid(conv(params, "proj", h)) * brightness_map(x, cfg.k)


def brightness_map(x: Tensor, k: int) -> Tensor:
    """Per-pixel max over RGB, max-pooled ``k`` times: ``(N, 1, H/2^k, W/2^k)``."""
    b = ops.max(x, axis=1, keepdims=True)
    for _ in range(k):
        b = ops.max_pool2d(b, 2)
    return b


def decoder_forward(f: Tensor, cfg: CodecConfig, params: Params) -> Tensor:
    """NCHW latent map -> NCHW image batch in (0, 1)."""
    if f.ndim != 4 or f.shape[1] != cfg.channels:
        raise DimensionError(
            f"decoder expects a latent of shape (N, {cfg.channels}, h, w), got {f.shape}"
        )
    h = conv(params, "proj", f)
    for i in reversed(range(cfg.k)):
        h = resblock(params, f"stage{i}", ops.upsample_nearest(h, 2))
    return ops.sigmoid(conv(params, "head", h))


def images_to_nchw(image) -> Tensor:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[-1] != 3:
        raise DimensionError(f"expected an (H, W, 3) or (N, H, W, 3) image, got {data.shape}")
    return Tensor(np.ascontiguousarray(data.transpose(0, 3, 1, 2)))


def encode(image, cfg: CodecConfig, params: Params, provenance: str = "low") -> LatentFeature:
    x = images_to_nchw(image)
    if x.data.min() < 0.0 or x.data.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return LatentFeature(encoder_forward(x, cfg, params), provenance)


def decode(feature: LatentFeature, cfg: CodecConfig, params: Params, squeeze: bool = True) -> np.ndarray:
    """Decode to channel-last images; a batch of one is squeezed to ``(H, W, 3)``."""
    out = decoder_forward(feature.tensor, cfg, params).data.transpose(0, 2, 3, 1)
    return out[0] if squeeze and out.shape[0] == 1 else out
