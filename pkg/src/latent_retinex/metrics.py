"""Full-reference distortion metrics on [0, 1] images."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; identical images give ``inf``."""
    a, b = _check_pair(a, b)
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def to_gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim(a, b, window: int = 11, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean structural similarity of the grayscale (channel-mean) images.

    Statistics come from a normalised Gaussian window evaluated only where
    it fits entirely inside the image.
    """
    a, b = _check_pair(a, b)
    a, b = to_gray(a), to_gray(b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (window, window)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
