"""Flat ``key = value`` run configuration shared by every CLI subcommand."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional

from .codec import CodecConfig
from .data import CorpusSpec
from .diffusion import DenoiserConfig, make_schedule
from .errors import ConfigError
from .retinex import RetinexConfig
from .training import LossWeights, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int
    # codec
    k: int = 3
    channels: int = 64
    base_width: int = 8
    # decomposition
    tau: float = 1e-4
    gamma: float = 0.2
    sharpness: float = 20.0
    # diffusion
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    S: int = 20
    denoiser_width: int = 64
    # training
    stage1_iterations: int = 2000
    stage2_iterations: int = 5000
    batch_size: int = 4
    patch_size: int = 64
    lr: float = 2e-3
    lr_decay: float = 0.8
    decay_interval: float = 0.2
    lr_stage2: float = 1e-3
    scc_batch: int = 1
    scc_grad_steps: int = 0  # 0 = back-propagate through every sampler step
    scc_squared: bool = False
    dtype: str = "float64"
    lambda_1: float = 0.01
    lambda_2: float = 0.1
    lambda_3: float = 0.01
    lambda_g: float = 10.0
    # data
    data_dir: str = "data"
    image_size: int = 64
    stage1_pairs: int = 64
    stage2_low: int = 256
    stage2_high: int = 256
    val_pairs: int = 32
    low_noise: float = 0.005

    def __post_init__(self):
        # build every sub-config once so range errors surface at load time
        self.codec()
        self.retinex()
        self.schedule()
        self.train(1)
        self.weights()
        self.corpus()
        self.denoiser()

    def codec(self) -> CodecConfig:
        return CodecConfig(k=self.k, channels=self.channels, base_width=self.base_width)

    def retinex(self) -> RetinexConfig:
        return RetinexConfig(tau=self.tau, gamma=self.gamma, sharpness=self.sharpness)

    def schedule(self):
        sched = make_schedule(self.T, self.beta_1, self.beta_T)
        if self.S < 1 or self.T % self.S:
            raise ConfigError(f"S={self.S} must divide T={self.T}", key="S")
        return sched

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(channels=self.channels, width=self.denoiser_width)

    def weights(self) -> LossWeights:
        return LossWeights(scc=self.lambda_1, ref=self.lambda_2, ill=self.lambda_3, edge=self.lambda_g)

    def train(self, stage: int) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            iterations=self.stage1_iterations if stage == 1 else self.stage2_iterations,
            batch_size=self.batch_size, patch_size=self.patch_size, lr=self.lr,
            lr_decay=self.lr_decay, decay_interval=self.decay_interval, lr_stage2=self.lr_stage2,
            sample_steps=self.S, scc_batch=self.scc_batch, scc_grad_steps=self.scc_grad_steps,
            scc_squared=self.scc_squared, dtype=self.dtype, seed=self.seed,
        )

    def corpus(self) -> CorpusSpec:
        return CorpusSpec(seed=self.seed, size=self.image_size, stage1_pairs=self.stage1_pairs,
                          stage2_low=self.stage2_low, stage2_high=self.stage2_high,
                          val_pairs=self.val_pairs, low_noise=self.low_noise)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key} (expected {kind})", key=key) from None


def parse_config(text: str, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}", key=line)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        values[key] = _convert(key, raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "seed" not in values:
        raise ConfigError("config must set seed", key="seed")
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key="seed") from exc


def load_config(path, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", key="config") from exc
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(RunConfig))


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.txt"
    path.write_text(dump_config(cfg))
    return path
