"""The full NPT stack, its masked objective, and checkpoint serialisation."""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionMaps, ConfigError, MhsaParams, aba, abd
from .embedding import (CATEGORICAL, AttributeSchema, EmbedParams, EncodingStats,
                        decode_predictions, input_embed, output_embed)
from .masking import MaskMatrix
from .tensor import DeterministicRng, Tensor


@dataclass
class RunConfig:
    layers: int = 4
    heads: int = 2
    embed_dim: int = 16
    dropout: float = 0.1
    p_feature: float = 0.15
    p_target: float = 1.0
    mask_mode: str = "supervised"
    lambda_schedule: str = "cosine"
    lambda_value: float = 0.5
    lr: float = 1e-3
    total_steps: int = 1000
    flat_fraction: float = 0.7
    batch_size: int = 0
    seed: int = 0
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-6
    weight_decay: float = 0.0
    lookahead_alpha: float = 0.5
    lookahead_k: int = 6
    split: tuple = (0.7, 0.2, 0.1)
    ablate_abd: bool = False
    dtype: str = "float32"
    eval_every: int = 50

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.split = tuple(float(s) for s in self.split)
        if self.layers < 2 or self.layers % 2:
            raise ConfigError(f"layers must be a positive even number, got {self.layers}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")
        if self.lambda_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lambda_schedule {self.lambda_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 <= self.flat_fraction <= 1.0:
            raise ConfigError(f"flat_fraction must lie in [0, 1], got {self.flat_fraction}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def tradeoff_lambda(step: int, total_steps: int) -> float:
    """Cosine anneal from 1 (all feature loss) at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    t = min(max(step, 0), total_steps) / total_steps
    return 0.5 * (1.0 + math.cos(math.pi * t))


class NPT:
    """Input embedding, alternating ABD/ABA blocks, output embedding.

    With ``config.ablate_abd`` every ABD layer is the identity, which leaves
    a per-row network with no path between datapoints.
    """

    def __init__(self, schema: AttributeSchema, stats: EncodingStats, config: RunConfig,
                 rng: DeterministicRng | None = None):
        d, e = schema.d, config.embed_dim
        if (d * e) % config.heads:
            raise ConfigError(f"heads={config.heads} must divide d*e={d * e}")
        self.schema = schema
        self.config = config
        self.step = 0
        dtype = config.np_dtype
        rng = rng or DeterministicRng(config.seed, 1)
        self.embed = EmbedParams.init(schema, e, stats, rng, dtype)
        self.layers: list[MhsaParams | None] = []
        for layer in range(config.layers):
            if layer % 2 == 0:
                self.layers.append(None if config.ablate_abd else MhsaParams.init(d * e, config.heads, rng, dtype))
            else:
                self.layers.append(MhsaParams.init(e, config.heads, rng, dtype))

    @property
    def stats(self) -> EncodingStats:
        return self.embed.stats

    def parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.named_tensors().items()}
        for layer, params in enumerate(self.layers):
            if params is None:
                continue
            kind = "abd" if layer % 2 == 0 else "aba"
            for k, v in params.named_tensors().items():
                out[f"layers.{layer}.{kind}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, x_input: np.ndarray, mask: np.ndarray, train: bool = False,
                rng: DeterministicRng | None = None, capture_attention: bool = False):
        """Per-attribute predictions ``Z`` (list of ``n x e_j``) and optional attention maps."""
        if x_input.shape != (x_input.shape[0], self.schema.d) or mask.shape != x_input.shape:
            raise ConfigError(f"input {x_input.shape} / mask {mask.shape} do not match d={self.schema.d}")
        maps = AttentionMaps() if capture_attention else None
        drop = self.config.dropout
        h = input_embed(x_input, mask, self.schema, self.embed)
        for layer, params in enumerate(self.layers):
            capture = [] if capture_attention else None
            if layer % 2 == 0:
                if params is None:
                    continue
                h = abd(h, params, drop, rng, train, capture)
                axis = "datapoint"
            else:
                h = aba(h, params, drop, rng, train, capture)
                axis = "attribute"
            if capture:
                maps.add(layer, capture[0], axis)
        return output_embed(h, self.embed), maps

    def predict(self, x_input: np.ndarray, mask: np.ndarray) -> np.ndarray:
        z, _ = self.forward(x_input, mask, train=False)
        return decode_predictions(z, self.schema, self.stats)


def _nll_sum(z: list[Tensor], x_true: np.ndarray, entries: np.ndarray, schema: AttributeSchema):
    total = None
    count = 0
    for j, col in enumerate(schema.columns):
        rows = np.flatnonzero(entries[:, j])
        if rows.size == 0:
            continue
        picked = T.take_rows(z[j], rows)
        if col.kind == CATEGORICAL:
            codes = x_true[rows, j].astype(np.int64)
            term = T.tsum(T.gather_last(T.log_softmax_last(picked), codes)) * -1.0
        else:
            diff = T.reshape(picked, (rows.size,)) - Tensor(x_true[rows, j], dtype=picked.dtype)
            term = T.tsum(T.square(diff)) * 0.5
        total = term if total is None else total + term
        count += rows.size
    return total, count


def npt_loss(z: list[Tensor], x_true: np.ndarray, mask: MaskMatrix, lam: float,
             schema: AttributeSchema) -> Tensor:
    """``(1 - lam) * mean target NLL + lam * mean feature NLL``.

    Categorical entries use cross-entropy; continuous entries a unit-variance
    Gaussian NLL without its constant, i.e. half the squared error in
    standardised units.
    """
    t_sum, t_count = _nll_sum(z, x_true, mask.target_loss, schema)
    f_sum, f_count = _nll_sum(z, x_true, mask.feature_loss, schema)
    if t_count == 0 and f_count == 0:
        raise ValueError("no loss entries selected")
    dtype = z[0].dtype
    loss = Tensor(0.0, dtype=dtype)
    if t_count:
        loss = loss + t_sum * ((1.0 - lam) / t_count)
    elif lam < 1.0:
        warnings.warn("empty target loss set; target term contributes 0", RuntimeWarning, stacklevel=2)
    if f_count:
        loss = loss + f_sum * (lam / f_count)
    return loss


def target_nll(z: list[Tensor], x_true: np.ndarray, mask: MaskMatrix, schema: AttributeSchema) -> tuple[float, int]:
    """Summed target NLL over scored target entries and how many there were."""
    total, count = _nll_sum(z, x_true, mask.target_loss, schema)
    return (float(total.data) if total is not None else 0.0), count


# Checkpoint layout (little endian):
#   b"NPTC" | u32 version | u32 tensor count
#   per tensor: u16 name length | utf-8 name | u8 rank | u64 dims[rank] | f32 data
#   u32 json length | utf-8 json {config, schema, stats, step}
MAGIC = b"NPTC"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(model: NPT, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(model.parameters()))]
    for name, t in model.parameters().items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    meta = {
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "stats": model.stats.to_dict(),
        "step": model.step,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint reading {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> tuple[NPT, RunConfig]:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"invalid tensor name at offset {at}") from None
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data
    (blob_len,) = r.unpack("<I", "json length")
    at = r.pos
    try:
        meta = json.loads(r.take(blob_len, "json").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointFormatError(f"invalid json blob at offset {at}") from None
    if r.pos != len(buf):
        raise CheckpointFormatError(f"trailing bytes at offset {r.pos}")

    config = RunConfig.from_dict(meta["config"])
    schema = AttributeSchema.from_dict(meta["schema"])
    stats = EncodingStats.from_dict(meta["stats"])
    model = NPT(schema, stats, config, DeterministicRng(0, 0))
    params = model.parameters()
    if set(params) != set(tensors):
        raise CheckpointFormatError(f"tensor names do not match the model: {sorted(set(params) ^ set(tensors))}")
    for name, p in params.items():
        if p.shape != tensors[name].shape:
            raise CheckpointFormatError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.shape}")
    for name, p in params.items():
        p.data[...] = tensors[name]
    model.step = int(meta.get("step", 0))
    return model, config
