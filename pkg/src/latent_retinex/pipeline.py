"""Inference: low-light image -> latent -> conditional sampling -> decoded image."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .autodiff import no_grad
from .codec import LATENT_RANGE, decode, encode
from .diffusion import NoiseSchedule, make_eps_fn, make_schedule, sample
from .model import ModelParams
from .retinex import RetinexConfig, ctdn_forward


def enhance(image: np.ndarray, model: ModelParams, S: int = 20,
            sched: Optional[NoiseSchedule] = None, seed: int = 0,
            clip: Optional[Tuple[float, float]] = LATENT_RANGE) -> np.ndarray:
    """Enhance one ``(H, W, 3)`` image or an ``(N, H, W, 3)`` batch.

    Only the low-light input is used: its feature conditions the sampler and
    the restored feature is decoded directly. Clean-feature estimates inside
    the sampler are clamped to ``clip`` (the encoder's output range).
    """
    sched = sched or make_schedule()
    dtype = model.dtype
    with no_grad():
        feature = encode(np.asarray(image, dtype=dtype), model.codec, model.encoder, "low")
        eps_fn = make_eps_fn(model.denoiser, model.denoiser_cfg)
        restored = sample(feature, S, eps_fn, sched, seed, clip=clip)
        return decode(restored, model.codec, model.decoder, squeeze=np.ndim(image) == 3)


def decompose(image: np.ndarray, model: ModelParams,
              rcfg: RetinexConfig = RetinexConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Reflectance ``(h, w, C)`` and illumination ``(h, w, 1)`` of one image's latent."""
    with no_grad():
        feature = encode(np.asarray(image, dtype=model.dtype), model.codec, model.encoder, "low")
        pair = ctdn_forward(feature, model.ctdn, rcfg)
    return pair.R.data[0].transpose(1, 2, 0), pair.L.data[0].transpose(1, 2, 0)


def normalize_for_display(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    return np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
