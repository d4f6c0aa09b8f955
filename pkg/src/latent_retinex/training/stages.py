"""Two-stage training: decomposition/codec on exposure pairs, then the denoiser on unpaired data."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..autodiff import Tape, Tensor, no_grad, ops
from ..codec import LATENT_RANGE, decoder_forward, encoder_forward
from ..diffusion import NoiseSchedule, make_eps_fn, make_schedule, q_sample, sample
from ..errors import ConfigError, ContractError, TapeStateError
from ..model import ModelParams
from ..retinex import RetinexConfig, RetinexPair, ctdn_forward, gamma_correct, recompose
from .losses import loss_con, loss_diff, loss_ill, loss_rec, loss_ref, loss_scc
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

STAGE1_FIELDS = ("iteration", "total", "con", "rec", "ref", "ill", "lr", "seconds")
STAGE2_FIELDS = ("iteration", "diff", "scc", "lr", "seconds")


@dataclass(frozen=True)
class LossWeights:
    scc: float = 0.01    # lambda_1
    ref: float = 0.1     # lambda_2
    ill: float = 0.01    # lambda_3
    edge: float = 10.0   # lambda_g

    def __post_init__(self):
        for name in ("scc", "ref", "ill", "edge"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative", key=f"lambda_{name}")


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    iterations: int = 2000
    batch_size: int = 4
    patch_size: int = 64
    lr: float = 2e-3            # stage-1 initial rate
    lr_decay: float = 0.8
    decay_interval: float = 0.2  # fraction of the run between decays
    lr_stage2: float = 1e-3
    sample_steps: int = 20
    scc_batch: int = 1          # images per consistency step (it runs the full sampler)
    scc_grad_steps: int = 0     # final sampler steps the consistency gradient flows through, 0 = all
    scc_squared: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}", key="stage")
        if self.iterations < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("iterations, batch_size and patch_size must be positive", key="iterations")
        if self.scc_batch < 1:
            raise ConfigError("scc_batch must be positive", key="scc_batch")
        if not 0 <= self.scc_grad_steps <= self.sample_steps:
            raise ConfigError(f"scc_grad_steps must lie in [0, {self.sample_steps}]", key="scc_grad_steps")
        if not 0 < self.decay_interval <= 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay and decay_interval must lie in (0, 1]", key="lr_decay")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}", key="dtype")

    def stage1_lr(self, iteration: int) -> float:
        every = max(1, int(round(self.decay_interval * self.iterations)))
        return self.lr * self.lr_decay ** (iteration // every)


@dataclass
class TrainResult:
    model: ModelParams
    history: List[Dict[str, float]]
    seconds: float


def _nchw(images: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=dtype))


def _crop(rng: np.random.Generator, images: np.ndarray, size: int) -> np.ndarray:
    """Same random crop for every image in the leading axes (keeps exposure pairs aligned)."""
    h, w = images.shape[-3:-1]
    if size > min(h, w):
        raise ConfigError(f"patch size {size} exceeds image size {h}x{w}", key="patch_size")
    if size == h == w:
        return images
    y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
    return images[..., y:y + size, x:x + size, :]


def _track(model: ModelParams, names: Sequence[str]):
    """Tracked tensors for the sets in ``names``; other sets stay as plain arrays."""
    views = {}
    sources = {}
    for s, params in model.sets.items():
        if s in names:
            views[s] = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            sources.update({f"{s}/{k}": t for k, t in views[s].items()})
        else:
            views[s] = params
    return views, sources


def _apply(model: ModelParams, grads: Dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    for s in model.frozen:
        if any(name.startswith(s + "/") for name in grads):
            raise ContractError(f"refusing to update frozen parameter set {s}")
    flat = {f"{s}/{k}": v for s in model.trainable() for k, v in model.sets[s].items()}
    new = adam_step(flat, grads, state, lr)
    for name, v in new.items():
        s, _, k = name.partition("/")
        model.sets[s][k] = v


def _write_log(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# -- stage 1 ------------------------------------------------------------------

def stage1_losses(views, model: ModelParams, x1: Tensor, x2: Tensor,
                  weights: LossWeights, rcfg: RetinexConfig) -> Dict[str, Tensor]:
    """Content loss for the codec and decomposition losses for the CTDN.

    The decomposition losses also reach the encoder, which pushes the
    features of the two exposures towards a shared reflectance.
    """
    b = x1.shape[0]
    x = ops.concat([x1, x2], axis=0)
    f = encoder_forward(x, model.codec, views["encoder"])
    recon = decoder_forward(f, model.codec, views["decoder"])
    con = loss_con([x1, x2], [recon[:b], recon[b:]])
    pair = ctdn_forward(f, views["ctdn"], rcfg)
    rs = [pair.R[:b], pair.R[b:]]
    ls = [pair.L[:b], pair.L[b:]]
    rec = loss_rec([f[:b], f[b:]], rs, ls)
    ref = loss_ref(rs[0], rs[1])
    ill = loss_ill(ls, rs, weights.edge)
    total = con + rec + ref * weights.ref + ill * weights.ill
    return dict(total=total, con=con, rec=rec, ref=ref, ill=ill)


def train_stage1(pairs: np.ndarray, model: ModelParams, cfg: TrainConfig,
                 weights: LossWeights = LossWeights(), rcfg: RetinexConfig = RetinexConfig(),
                 log_path=None, callback: Optional[Callable[[int, ModelParams], None]] = None
                 ) -> TrainResult:
    """Optimise encoder, CTDN and decoder on ``pairs`` of shape ``(P, 2, H, W, 3)``.

    The denoiser set is frozen for the whole run.
    """
    pairs = np.asarray(pairs)
    if pairs.ndim != 5 or pairs.shape[1] != 2:
        raise ContractError(f"stage 1 needs exposure pairs (P, 2, H, W, 3), got {pairs.shape}")
    dtype = np.dtype(cfg.dtype)
    model.freeze(["denoiser"])
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    start = time.perf_counter()
    batch = min(cfg.batch_size, len(pairs))
    for it in range(cfg.iterations):
        idx = rng.choice(len(pairs), size=batch, replace=False)
        crop = _crop(rng, pairs[idx], cfg.patch_size)
        x1, x2 = _nchw(crop[:, 0], dtype), _nchw(crop[:, 1], dtype)
        views, sources = _track(model, model.trainable())
        with Tape() as tape:
            terms = stage1_losses(views, model, x1, x2, weights, rcfg)
        grads = tape.gradient(terms["total"], sources)
        lr = cfg.stage1_lr(it)
        _apply(model, grads, state, lr)
        row = {k: float(v.item()) for k, v in terms.items()}
        row.update(iteration=it, lr=lr, seconds=time.perf_counter() - start)
        history.append(row)
        if callback is not None:
            callback(it, model)
        if it % 100 == 0:
            log.info("stage1 it=%d total=%.5f con=%.5f", it, row["total"], row["con"])
    model.meta["stage1_done"] = True
    model.freeze([])
    if log_path is not None:
        _write_log(log_path, STAGE1_FIELDS, history)
    return TrainResult(model, history, time.perf_counter() - start)


@dataclass(frozen=True)
class Stage1Report:
    con: float           # content loss averaged over the pairs
    recompose_err: float  # mean |R * L - F| / mean |F|
    ref_gap: float       # mean |R1 - R2| across exposure pairs


def stage1_report(pairs: np.ndarray, model: ModelParams, rcfg: RetinexConfig = RetinexConfig(),
                  dtype=np.float64) -> Stage1Report:
    """Held-out quality of the codec and the decomposition, without gradients."""
    pairs = np.asarray(pairs)
    if pairs.ndim != 5 or pairs.shape[1] != 2:
        raise ContractError(f"expected exposure pairs (P, 2, H, W, 3), got {pairs.shape}")
    feats = [decompose_images(pairs[:, j], model, rcfg, dtype) for j in range(2)]
    with no_grad():
        cons = []
        for j in range(2):
            recon = decoder_forward(Tensor(feats[j][0]), model.codec, model.decoder).data
            x = pairs[:, j].transpose(0, 3, 1, 2)
            cons.append(np.sqrt(np.mean((recon - x) ** 2, axis=(1, 2, 3))).mean())
    f = np.concatenate([feats[0][0], feats[1][0]])
    rl = np.concatenate([feats[0][1] * feats[0][2], feats[1][1] * feats[1][2]])
    return Stage1Report(
        con=float(sum(cons)),
        recompose_err=float(np.abs(rl - f).mean() / np.abs(f).mean()),
        ref_gap=float(np.abs(feats[0][1] - feats[1][1]).mean()),
    )


# -- stage 2 ------------------------------------------------------------------

@dataclass
class Stage2Features:
    """Frozen-network quantities used by stage 2, computed once up front."""

    f_low: np.ndarray    # conditioning features x~ (N, C, h, w)
    r_low: np.ndarray
    l_low: np.ndarray
    l_high: np.ndarray   # (M, 1, h, w)
    pseudo: np.ndarray   # R_low * L_low**gamma


def decompose_images(images: np.ndarray, model: ModelParams, rcfg: RetinexConfig,
                     dtype=np.float64, chunk: int = 32):
    """Encoder features and CTDN decomposition for a stack of HWC images."""
    fs, rs, ls = [], [], []
    with no_grad():
        for i in range(0, len(images), chunk):
            x = _nchw(images[i:i + chunk], dtype)
            f = encoder_forward(x, model.codec, model.encoder)
            pair = ctdn_forward(f, model.ctdn, rcfg)
            fs.append(f.data)
            rs.append(pair.R.data)
            ls.append(pair.L.data)
    return np.concatenate(fs), np.concatenate(rs), np.concatenate(ls)


def stage2_features(low: np.ndarray, high: np.ndarray, model: ModelParams,
                    rcfg: RetinexConfig, dtype=np.float64) -> Stage2Features:
    f_low, r_low, l_low = decompose_images(low, model, rcfg, dtype)
    _, _, l_high = decompose_images(high, model, rcfg, dtype)
    with no_grad():
        pseudo = recompose_pseudo(r_low, l_low, rcfg.gamma)
    return Stage2Features(f_low, r_low, l_low, l_high, pseudo)


def recompose_pseudo(r_low, l_low, gamma: float) -> np.ndarray:
    """Pseudo-label ``R_low * L_low**gamma``."""
    return recompose(RetinexPair(Tensor(r_low), gamma_correct(l_low, gamma))).data


def train_stage2(low: np.ndarray, high: np.ndarray, model: ModelParams, cfg: TrainConfig,
                 weights: LossWeights = LossWeights(), rcfg: RetinexConfig = RetinexConfig(),
                 sched: Optional[NoiseSchedule] = None, log_path=None,
                 features: Optional[Stage2Features] = None) -> TrainResult:
    """Optimise only the denoiser on unpaired low / normal-light images.

    Each iteration re-pairs random low and high images and takes the
    gradient of the noise-prediction loss. When ``weights.scc > 0`` it then
    runs the sampler on the first ``cfg.scc_batch`` low images and adds the
    gradient of the weighted consistency loss, back-propagated through the
    last ``cfg.scc_grad_steps`` sampler steps (all of them by default). One
    Adam update on the summed gradient follows, so the two terms are
    balanced by the weight rather than by separate step sizes.
    """
    if not model.meta.get("stage1_done"):
        raise TapeStateError("stage 2 needs a model that has completed stage 1")
    dtype = np.dtype(cfg.dtype)
    sched = sched or make_schedule()
    model.freeze(["encoder", "ctdn", "decoder"])
    feats = features or stage2_features(low, high, model, rcfg, dtype)
    rng = np.random.default_rng(cfg.seed)
    # separate stream for sampler noise so runs with and without the
    # consistency step see the same batches
    sampler_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    history = []
    start = time.perf_counter()
    n_low, n_high = len(feats.f_low), len(feats.l_high)
    batch = min(cfg.batch_size, n_low, n_high)
    lr = cfg.lr_stage2
    for it in range(cfg.iterations):
        li = rng.choice(n_low, size=batch, replace=False)
        hi = rng.choice(n_high, size=batch, replace=False)
        cond = Tensor(feats.f_low[li].astype(dtype, copy=False))
        x0 = feats.r_low[li] * feats.l_high[hi]
        t = rng.integers(1, sched.T + 1, size=batch)
        eps = rng.standard_normal(x0.shape).astype(dtype)
        x_t = q_sample(x0.astype(dtype, copy=False), t, eps, sched)

        views, sources = _track(model, ["denoiser"])
        with Tape() as tape:
            pred = make_eps_fn(views["denoiser"], model.denoiser_cfg)(x_t, cond, t)
            diff = loss_diff(Tensor(eps), pred)
        grads = tape.gradient(diff, sources)
        row = dict(iteration=it, diff=float(diff.item()), scc=float("nan"), lr=lr)

        if weights.scc > 0:
            sub = li[:cfg.scc_batch]
            views, sources = _track(model, ["denoiser"])
            eps_fn = make_eps_fn(views["denoiser"], model.denoiser_cfg)
            with Tape() as tape:
                restored = sample(Tensor(feats.f_low[sub].astype(dtype, copy=False)),
                                  cfg.sample_steps, eps_fn, sched,
                                  seed=int(sampler_rng.integers(2 ** 31)),
                                  grad_steps=cfg.scc_grad_steps or cfg.sample_steps,
                                  clip=LATENT_RANGE)
                scc = loss_scc(Tensor(feats.pseudo[sub].astype(dtype, copy=False)),
                               restored.tensor, squared=cfg.scc_squared)
                weighted = scc * weights.scc
            for name, g in tape.gradient(weighted, sources).items():
                grads[name] = grads[name] + g
            row["scc"] = float(scc.item())
        _apply(model, grads, state, lr)

        row["seconds"] = time.perf_counter() - start
        history.append(row)
        if it % 100 == 0:
            log.info("stage2 it=%d diff=%.5f scc=%.5f", it, row["diff"], row["scc"])
    model.meta["stage2_done"] = True
    model.freeze([])
    if log_path is not None:
        _write_log(log_path, STAGE2_FIELDS, history)
    return TrainResult(model, history, time.perf_counter() - start)
