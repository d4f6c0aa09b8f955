"""Synthetic scenes, exposure degradation, image files and the on-disk corpus.

Scenes are smooth compositions (a colour gradient, soft-edged rectangles
and discs, low-frequency texture) so that a small autoencoder can represent
them. Exposure pairs of one scene stand in for multi-exposure captures;
unrelated bright scenes stand in for an unpaired normal-light collection.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class Primitive:
    kind: str                 # "rect" | "disc"
    center: Tuple[float, float]
    size: Tuple[float, float]  # half extents (rect) or (radius, radius)
    color: Tuple[float, float, float]
    softness: float = 1.5


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int = 64
    palette: Tuple[Tuple[float, float, float], ...] = ()
    gradient_angle: float = 0.0
    primitives: Tuple[Primitive, ...] = ()
    texture_amplitude: float = 0.04
    texture_cells: int = 4

    @classmethod
    def random(cls, seed: int, size: int = 64) -> "SceneSpec":
        rng = np.random.default_rng(seed)
        palette = tuple(tuple(rng.uniform(0.15, 0.95, 3).round(4)) for _ in range(4))
        prims: List[Primitive] = []
        for _ in range(int(rng.integers(2, 5))):
            kind = "rect" if rng.random() < 0.5 else "disc"
            center = tuple(rng.uniform(0.15, 0.85, 2) * size)
            if kind == "rect":
                extent = tuple(rng.uniform(0.1, 0.3, 2) * size)
            else:
                r = float(rng.uniform(0.08, 0.22) * size)
                extent = (r, r)
            color = palette[int(rng.integers(1, len(palette)))]
            prims.append(Primitive(kind, center, extent, color, float(rng.uniform(1.5, 3.0))))
        return cls(seed=seed, size=size, palette=palette,
                   gradient_angle=float(rng.uniform(0, 2 * np.pi)), primitives=tuple(prims))


def _smooth_noise(rng: np.random.Generator, cells: int, size: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1, 3))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    frac = pos - i0
    rows = coarse[i0] * (1 - frac)[:, None, None] + coarse[i0 + 1] * frac[:, None, None]
    return rows[:, i0] * (1 - frac)[None, :, None] + rows[:, i0 + 1] * frac[None, :, None]


def gen_scene(spec: SceneSpec) -> np.ndarray:
    """Render ``spec`` as an (H, W, 3) float image in [0, 1]."""
    if spec.size < 1 or len(spec.palette) < 2:
        raise ConfigError("scene needs a positive size and at least two palette colours", key="size")
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    direction = np.array([np.cos(spec.gradient_angle), np.sin(spec.gradient_angle)])
    ramp = ((xx - n / 2) * direction[0] + (yy - n / 2) * direction[1]) / n + 0.5
    ramp = np.clip(ramp, 0.0, 1.0)[..., None]
    img = (1 - ramp) * np.array(spec.palette[0]) + ramp * np.array(spec.palette[1])
    for p in spec.primitives:
        dx, dy = xx - p.center[0], yy - p.center[1]
        if p.kind == "rect":
            dist = np.maximum(np.abs(dx) - p.size[0], np.abs(dy) - p.size[1])
        elif p.kind == "disc":
            dist = np.hypot(dx, dy) - p.size[0]
        else:
            raise ConfigError(f"unknown primitive {p.kind!r}", key="primitives")
        alpha = (0.5 * (1.0 - np.tanh(dist / p.softness)))[..., None]
        img = (1 - alpha) * img + alpha * np.array(p.color)
    if spec.texture_amplitude:
        rng = np.random.default_rng([spec.seed, 1])
        img = img + spec.texture_amplitude * _smooth_noise(rng, spec.texture_cells, n)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class ExposureModel:
    gain: float = 1.0
    gamma: float = 1.0
    noise: float = 0.0

    def __post_init__(self):
        if not 0 < self.gain <= 1:
            raise ConfigError(f"gain must lie in (0, 1], got {self.gain}", key="gain")
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1 (darkening), got {self.gamma}", key="gamma")
        if self.noise < 0:
            raise ConfigError(f"noise must be nonnegative, got {self.noise}", key="noise")

    @property
    def is_identity(self) -> bool:
        return self.gain == 1 and self.gamma == 1 and self.noise == 0


def degrade(image: np.ndarray, model: ExposureModel, seed: int = 0) -> np.ndarray:
    """``clip(gain * image**gamma + noise)`` with seeded Gaussian noise."""
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 1:
        raise ContractError("degrade expects an image in [0, 1]")
    if model.is_identity:
        return image.copy()
    out = model.gain * np.power(image, model.gamma)
    if model.noise:
        out = out + np.random.default_rng(seed).normal(0.0, model.noise, image.shape)
    return np.clip(out, 0.0, 1.0)


# -- image files -------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """8-bit levels, rounding half up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ContractError(f"write_image expects an (H, W, 3) image, got {image.shape}")
    Image.fromarray(quantize(image), "RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


# -- corpus -------------------------------------------------------------------

LOW_LIGHT = dict(gain=(0.15, 0.35), gamma=(1.2, 1.6))
BRIGHTER = dict(gain=(0.6, 1.0), gamma=(1.0, 1.2))


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    size: int = 64
    stage1_pairs: int = 64
    stage2_low: int = 256
    stage2_high: int = 256
    val_pairs: int = 32
    low_noise: float = 0.005


@dataclass
class Corpus:
    spec: CorpusSpec
    stage1: np.ndarray       # (P, 2, H, W, 3): darker exposure first
    stage2_low: np.ndarray   # (M, H, W, 3)
    stage2_high: np.ndarray  # (M', H, W, 3), unrelated scenes
    val_low: np.ndarray      # (V, H, W, 3)
    val_gt: np.ndarray       # (V, H, W, 3)
    manifest: List[Dict] = field(default_factory=list)


def _draw_exposure(rng: np.random.Generator, ranges: Dict, noise: float) -> ExposureModel:
    return ExposureModel(gain=float(rng.uniform(*ranges["gain"])),
                         gamma=float(rng.uniform(*ranges["gamma"])), noise=noise)


def make_corpus(spec: CorpusSpec = CorpusSpec()) -> Corpus:
    """Generate every split deterministically from ``spec.seed``.

    Scene seeds are disjoint between splits so validation scenes are never
    seen in training.
    """
    rng = np.random.default_rng(spec.seed)
    base = int(rng.integers(0, 2 ** 31 - 1))
    manifest: List[Dict] = []

    def scene(offset: int) -> Tuple[int, np.ndarray]:
        s = base + offset
        return s, gen_scene(SceneSpec.random(s, spec.size))

    def log(split, idx, seed, model, pair, role):
        manifest.append(dict(file=f"{split}/{idx:04d}.png", seed=seed, gain=model.gain,
                             gamma=model.gamma, noise=model.noise, pair=pair, role=role))

    stage1 = np.zeros((spec.stage1_pairs, 2, spec.size, spec.size, 3))
    for i in range(spec.stage1_pairs):
        s, img = scene(i)
        for j, ranges in enumerate((LOW_LIGHT, BRIGHTER)):
            model = _draw_exposure(rng, ranges, 0.0)
            stage1[i, j] = degrade(img, model, seed=s)
            log("stage1_pairs", 2 * i + j, s, model, i, ("under", "over")[j])

    low = np.zeros((spec.stage2_low, spec.size, spec.size, 3))
    for i in range(spec.stage2_low):
        s, img = scene(100_000 + i)
        model = _draw_exposure(rng, LOW_LIGHT, spec.low_noise)
        low[i] = degrade(img, model, seed=s)
        log("stage2_low", i, s, model, -1, "low")

    high = np.zeros((spec.stage2_high, spec.size, spec.size, 3))
    for i in range(spec.stage2_high):
        s, img = scene(200_000 + i)
        high[i] = img
        log("stage2_high", i, s, ExposureModel(), -1, "high")

    val_low = np.zeros((spec.val_pairs, spec.size, spec.size, 3))
    val_gt = np.zeros_like(val_low)
    for i in range(spec.val_pairs):
        s, img = scene(300_000 + i)
        model = _draw_exposure(rng, LOW_LIGHT, spec.low_noise)
        val_low[i] = degrade(img, model, seed=s)
        val_gt[i] = img
        log("val", 2 * i, s, model, i, "low")
        log("val", 2 * i + 1, s, ExposureModel(), i, "gt")

    return Corpus(spec, stage1, low, high, val_low, val_gt, manifest)


MANIFEST_FIELDS = ("file", "seed", "gain", "gamma", "noise", "pair", "role")


def write_corpus(corpus: Corpus, root) -> Path:
    """Write PNGs under ``root/{stage1_pairs,stage2_low,stage2_high,val}`` plus ``manifest.csv``.

    Paired splits interleave members: files ``2i`` and ``2i+1`` form pair ``i``.
    """
    root = Path(root)
    images = {
        "stage1_pairs": corpus.stage1.reshape((-1,) + corpus.stage1.shape[2:]),
        "stage2_low": corpus.stage2_low,
        "stage2_high": corpus.stage2_high,
        "val": np.stack([corpus.val_low, corpus.val_gt], axis=1).reshape((-1,) + corpus.val_low.shape[1:]),
    }
    for split, arr in images.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(arr):
            write_image(root / split / f"{i:04d}.png", img)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(corpus.manifest)
    return root


def read_split(root, split: str) -> np.ndarray:
    folder = Path(root) / split
    if not folder.is_dir():
        raise OSError(f"missing corpus split {folder}")
    files = sorted(f for f in os.listdir(folder) if f.endswith(".png"))
    if not files:
        raise OSError(f"no images in {folder}")
    return np.stack([read_image(folder / f) for f in files])


def load_pairs(root, split: str) -> np.ndarray:
    """Paired split as ``(P, 2, H, W, 3)``."""
    flat = read_split(root, split)
    if len(flat) % 2:
        raise OSError(f"paired split {split} has an odd number of images")
    return flat.reshape((-1, 2) + flat.shape[1:])


def read_manifest(root) -> List[Dict]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        return list(csv.DictReader(fh))


