"""Multi-head self-attention blocks and the two NPT attention layers.

ABD attends across datapoints on the flattened ``n x (d*e)`` representation;
ABA attends across the ``d`` attributes of each datapoint separately.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DeterministicRng, ShapeError, Tensor


class ConfigError(ValueError):
    """Raised on inconsistent model or run configuration."""


def glorot_uniform(fan_in: int, fan_out: int, rng: DeterministicRng, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


@dataclass
class MhsaParams:
    """Weights of one pre-LayerNorm MHSA block of width ``h`` with ``heads`` heads.

    ``wq``/``wk``/``wv`` are ``h x h``; column block ``j`` of width ``h/heads``
    is the projection of head ``j``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    wres: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    heads: int

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, width: int, heads: int, rng: DeterministicRng, dtype=None) -> "MhsaParams":
        if heads < 1 or width % heads:
            raise ConfigError(f"head count {heads} must divide width {width}")
        dtype = dtype if dtype is not None else T.get_default_dtype()
        h = width

        def weight(fi, fo):
            return Tensor(glorot_uniform(fi, fo, rng, dtype), requires_grad=True, dtype=dtype)

        def const(shape, value):
            return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, dtype=dtype)

        return cls(
            wq=weight(h, h),
            wk=weight(h, h),
            wv=weight(h, h),
            wo=weight(h, h),
            wres=Tensor(np.eye(h, dtype=dtype), requires_grad=True, dtype=dtype),
            ln1_gain=const(h, 1.0),
            ln1_bias=const(h, 0.0),
            ln2_gain=const(h, 1.0),
            ln2_bias=const(h, 0.0),
            ff1_w=weight(h, 4 * h),
            ff1_b=const(4 * h, 0.0),
            ff2_w=weight(4 * h, h),
            ff2_b=const(h, 0.0),
            heads=heads,
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            name: getattr(self, name)
            for name in (
                "wq", "wk", "wv", "wo", "wres",
                "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                "ff1_w", "ff1_b", "ff2_w", "ff2_b",
            )
        }


@dataclass
class AttentionMaps:
    """Post-softmax attention weights keyed by ``(layer, head)``."""

    maps: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    axis: dict[int, str] = field(default_factory=dict)

    def add(self, layer: int, weights: np.ndarray, axis: str) -> None:
        # weights: (..., heads, n_q, n_k); leading axes (ABA datapoints) are averaged
        w = weights.reshape((-1,) + weights.shape[-3:]).mean(axis=0)
        for head in range(w.shape[0]):
            self.maps[(layer, head)] = w[head]
        self.axis[layer] = axis

    def to_csv(self, out_dir, labels: dict[str, list] | None = None) -> list[Path]:
        """Write one CSV per (layer, head); header row and first column carry indices."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for (layer, head), w in sorted(self.maps.items()):
            kind = self.axis[layer]
            names = (labels or {}).get(kind) or list(range(w.shape[0]))
            path = out_dir / f"attention_layer{layer}_{kind}_head{head}.csv"
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([kind] + [str(x) for x in names])
                for name, row in zip(names, w):
                    writer.writerow([str(name)] + [repr(float(v)) for v in row])
            paths.append(path)
        return paths


def dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    dropout: float = 0.0,
    rng: DeterministicRng | None = None,
    train: bool = False,
) -> tuple[Tensor, np.ndarray]:
    """``softmax(Q K^T / sqrt(h)) V`` over the last two axes.

    Returns the output and a copy of the attention weights taken before
    dropout. Dropout acts on the normalised weights, which are not
    renormalised afterwards.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible Q {q.shape}, K {k.shape}, V {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * scale
    weights = T.softmax_last(scores)
    kept = weights.data.copy()
    weights = T.dropout(weights, dropout, train, rng)
    return T.matmul(weights, v), kept


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, h) -> (..., heads, n, h/heads)
    *lead, n, h = x.shape
    x = T.reshape(x, (*lead, n, heads, h // heads))
    return T.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, n, dh) -> (..., n, heads*dh)
    x = T.swapaxes(x, -3, -2)
    *lead, n, heads, dh = x.shape
    return T.reshape(x, (*lead, n, heads * dh))


def multi_head_self_attention(
    h_in: Tensor,
    params: MhsaParams,
    dropout: float = 0.0,
    rng: DeterministicRng | None = None,
    train: bool = False,
    capture: list | None = None,
) -> Tensor:
    """Self-attention over axis -2 of ``h_in`` (leading axes are batch)."""
    if h_in.shape[-1] != params.width:
        raise ShapeError(f"MHSA: input width {h_in.shape[-1]} != params width {params.width}")
    q = _split_heads(T.matmul(h_in, params.wq), params.heads)
    k = _split_heads(T.matmul(h_in, params.wk), params.heads)
    v = _split_heads(T.matmul(h_in, params.wv), params.heads)
    out, weights = dot_product_attention(q, k, v, dropout, rng, train)
    if capture is not None:
        capture.append(weights)
    return T.matmul(_merge_heads(out), params.wo)


def mhsa_block(
    h_in: Tensor,
    params: MhsaParams,
    dropout: float = 0.0,
    rng: DeterministicRng | None = None,
    train: bool = False,
    capture: list | None = None,
) -> Tensor:
    """``Res = H W_res + MHSelfAtt(LN(H))``; returns ``Res + rFF(LN(Res))``."""
    normed = T.layer_norm(h_in, params.ln1_gain, params.ln1_bias)
    att = multi_head_self_attention(normed, params, dropout, rng, train, capture)
    att = T.dropout(att, dropout, train, rng)
    res = T.matmul(h_in, params.wres) + att
    hidden = T.gelu(T.matmul(T.layer_norm(res, params.ln2_gain, params.ln2_bias), params.ff1_w) + params.ff1_b)
    hidden = T.dropout(hidden, dropout, train, rng)
    return res + (T.matmul(hidden, params.ff2_w) + params.ff2_b)


def abd(
    h_in: Tensor,
    params: MhsaParams,
    dropout: float = 0.0,
    rng: DeterministicRng | None = None,
    train: bool = False,
    capture: list | None = None,
) -> Tensor:
    """Attention between datapoints on an ``n x d x e`` representation."""
    n, d, e = h_in.shape
    if params.width != d * e:
        raise ConfigError(f"ABD width {params.width} != d*e = {d}*{e}")
    flat = T.reshape(h_in, (n, d * e))
    return T.reshape(mhsa_block(flat, params, dropout, rng, train, capture), (n, d, e))


def aba(
    h_in: Tensor,
    params: MhsaParams,
    dropout: float = 0.0,
    rng: DeterministicRng | None = None,
    train: bool = False,
    capture: list | None = None,
) -> Tensor:
    """Attention between the attributes of each datapoint, batched over rows."""
    if params.width != h_in.shape[-1]:
        raise ConfigError(f"ABA width {params.width} != e = {h_in.shape[-1]}")
    return mhsa_block(h_in, params, dropout, rng, train, capture)
