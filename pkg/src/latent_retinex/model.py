"""The four parameter sets of the full model and their binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic        4 bytes   b"LRDM"
    version      u32       currently 1
    meta_len     u32       length of the UTF-8 JSON metadata block
    meta         bytes     {"codec": {...}, "denoiser": {...}, "frozen": [...], ...}
    count        u32       number of tensors
    count x:
      name_len   u16
      name       bytes     UTF-8, "<set>/<param>", e.g. "encoder/stage0.conv1.w"
      dtype      u8        0 = float32, 1 = float64
      ndim       u8
      dims       ndim x u32
      data       product(dims) values, little-endian, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Set

import numpy as np

from .codec import CodecConfig, init_decoder, init_encoder
from .diffusion import DenoiserConfig, init_denoiser
from .errors import ContractError
from .layers import ParamArrays
from .retinex import init_ctdn

MAGIC = b"LRDM"
VERSION = 1
SETS = ("encoder", "ctdn", "decoder", "denoiser")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class ModelParams:
    codec: CodecConfig
    denoiser_cfg: DenoiserConfig
    sets: Dict[str, ParamArrays]
    frozen: Set[str] = field(default_factory=set)
    meta: Dict = field(default_factory=dict)  # free-form, e.g. completed stages

    def __post_init__(self):
        missing = set(SETS) - set(self.sets)
        if missing:
            raise ContractError(f"model is missing parameter sets {sorted(missing)}")
        unknown = set(self.frozen) - set(SETS)
        if unknown:
            raise ContractError(f"cannot freeze unknown sets {sorted(unknown)}")

    @classmethod
    def init(cls, codec: CodecConfig, denoiser_cfg: Optional[DenoiserConfig] = None,
             seed: int = 0, dtype=np.float64) -> "ModelParams":
        denoiser_cfg = denoiser_cfg or DenoiserConfig(channels=codec.channels)
        if denoiser_cfg.channels != codec.channels:
            raise ContractError("denoiser channels must match the latent channels")
        rngs = [np.random.default_rng([seed, i]) for i in range(len(SETS))]
        sets = {
            "encoder": init_encoder(codec, rngs[0]),
            "ctdn": init_ctdn(codec.channels, rngs[1]),
            "decoder": init_decoder(codec, rngs[2]),
            "denoiser": init_denoiser(denoiser_cfg, rngs[3]),
        }
        model = cls(codec, denoiser_cfg, sets)
        return model.astype(dtype)

    @property
    def encoder(self) -> ParamArrays:
        return self.sets["encoder"]

    @property
    def ctdn(self) -> ParamArrays:
        return self.sets["ctdn"]

    @property
    def decoder(self) -> ParamArrays:
        return self.sets["decoder"]

    @property
    def denoiser(self) -> ParamArrays:
        return self.sets["denoiser"]

    def freeze(self, names: Iterable[str]) -> None:
        self.frozen = set(names)
        self.__post_init__()

    def trainable(self) -> Iterable[str]:
        return [s for s in SETS if s not in self.frozen]

    def astype(self, dtype) -> "ModelParams":
        sets = {s: {k: v.astype(dtype) for k, v in p.items()} for s, p in self.sets.items()}
        return ModelParams(self.codec, self.denoiser_cfg, sets, set(self.frozen), dict(self.meta))

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.encoder.values())).dtype if self.encoder else self.denoiser["out.w"].dtype

    def count(self) -> Dict[str, int]:
        return {s: int(sum(v.size for v in p.values())) for s, p in self.sets.items()}


def save_checkpoint(model: ModelParams, path) -> Path:
    path = Path(path)
    meta = json.dumps({
        "codec": asdict(model.codec),
        "denoiser": asdict(model.denoiser_cfg),
        "frozen": sorted(model.frozen),
        "meta": model.meta,
    }, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    entries = [(f"{s}/{k}", v) for s in SETS for k, v in sorted(model.sets[s].items())]
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ContractError(f"cannot store {name} with dtype {arr.dtype}")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise OSError(f"truncated checkpoint {self.path}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise OSError(f"{path} is not a model checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise OSError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    sets: Dict[str, ParamArrays] = {s: {} for s in SETS}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES.get(code)
        if dt is None:
            raise OSError(f"{path}: unknown dtype code {code} for {name}")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        set_name, _, key = name.partition("/")
        if set_name not in sets:
            raise OSError(f"{path}: tensor {name} belongs to no known parameter set")
        sets[set_name][key] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise OSError(f"{path}: trailing bytes after tensor table")
    return ModelParams(CodecConfig(**meta["codec"]), DenoiserConfig(**meta["denoiser"]),
                       sets, set(meta["frozen"]), meta.get("meta", {}))
