"""Column schema, encoding, and the per-attribute input/output embeddings."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import ConfigError, glorot_uniform
from .tensor import DeterministicRng, Tensor

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
TYPE_INDEX = {CATEGORICAL: 0, CONTINUOUS: 1}


class DataError(ValueError):
    """Raised for malformed or unencodable data."""


@dataclass
class Column:
    name: str
    kind: str
    is_target: bool = False
    categories: list[str] | None = None

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and self.categories is not None and len(self.categories) < 2:
            raise ConfigError(f"column {self.name!r}: categorical columns need at least 2 categories")

    @property
    def width(self) -> int:
        """Encoded width ``e_j``: category count, or 1 for continuous."""
        if self.kind == CONTINUOUS:
            return 1
        if self.categories is None:
            raise ConfigError(f"column {self.name!r}: categories not yet known")
        return len(self.categories)


@dataclass
class AttributeSchema:
    columns: list[Column]
    role_column: str | None = None
    group_column: str | None = None

    @property
    def d(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def target_mask(self) -> np.ndarray:
        return np.array([c.is_target for c in self.columns], dtype=bool)

    @property
    def target_indices(self) -> list[int]:
        return [j for j, c in enumerate(self.columns) if c.is_target]

    def single_target(self) -> int:
        idx = self.target_indices
        if len(idx) != 1:
            raise ConfigError(f"expected exactly one target column, schema has {len(idx)}")
        return idx[0]

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            entry = {"name": c.name, "kind": c.kind, "target": c.is_target}
            if c.categories is not None:
                entry["categories"] = list(c.categories)
            cols.append(entry)
        out: dict = {"columns": cols}
        if self.role_column:
            out["role_column"] = self.role_column
        if self.group_column:
            out["group_column"] = self.group_column
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "AttributeSchema":
        if not isinstance(raw, dict) or "columns" not in raw:
            raise ConfigError("schema must be an object with a 'columns' list")
        unknown = set(raw) - {"columns", "role_column", "group_column"}
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        cols = []
        for entry in raw["columns"]:
            extra = set(entry) - {"name", "kind", "target", "categories"}
            if extra:
                raise ConfigError(f"unknown column keys {sorted(extra)} in {entry!r}")
            cats = entry.get("categories")
            cols.append(Column(str(entry["name"]), entry["kind"], bool(entry.get("target", False)),
                               [str(c) for c in cats] if cats is not None else None))
        return cls(cols, raw.get("role_column"), raw.get("group_column"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "AttributeSchema":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"schema file not found: {path}") from None
        return cls.from_dict(raw)


@dataclass
class EncodingStats:
    """Per-column standardisation stats (NaN for categorical columns)."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, raw: dict) -> "EncodingStats":
        return cls(np.array(raw["mean"], dtype=np.float64), np.array(raw["std"], dtype=np.float64))


def fit_stats(values: np.ndarray, schema: AttributeSchema, train_rows) -> EncodingStats:
    """Mean and population std of continuous columns over ``train_rows`` only."""
    rows = np.asarray(train_rows)
    sub = values[rows]
    mean = np.full(schema.d, np.nan)
    std = np.full(schema.d, np.nan)
    for j, col in enumerate(schema.columns):
        if col.kind != CONTINUOUS:
            continue
        observed = sub[:, j][~np.isnan(sub[:, j])]
        if observed.size == 0:
            raise DataError(f"column {col.name!r} has no observed training values")
        mean[j] = observed.mean()
        std[j] = observed.std()
        if std[j] == 0:
            raise DataError(f"column {col.name!r} is constant on the training rows (std = 0)")
    return EncodingStats(mean, std)


def standardize(values: np.ndarray, schema: AttributeSchema, stats: EncodingStats) -> np.ndarray:
    """Continuous columns in standardised units; categorical codes untouched."""
    out = np.array(values, dtype=np.float64, copy=True)
    for j, col in enumerate(schema.columns):
        if col.kind == CONTINUOUS:
            out[:, j] = (out[:, j] - stats.mean[j]) / stats.std[j]
    return out


def encode_column(values, mask, column: Column, mean: float = 0.0, std: float = 1.0,
                  dtype=None) -> Tensor:
    """``n x (e_j + 1)`` encoding: one-hot or standardised value, then the mask bit.

    Masked entries have their value slots zeroed whatever the raw value.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = values.shape[0]
    width = column.width
    out = np.zeros((n, width + 1), dtype=np.float64)
    live = ~mask
    if column.kind == CONTINUOUS:
        if std == 0:
            raise DataError(f"column {column.name!r}: std is zero")
        out[live, 0] = (values[live] - mean) / std
    else:
        codes = values[live]
        bad = ~np.isfinite(codes) | (codes < 0) | (codes >= width) | (codes != np.round(codes))
        if bad.any():
            raise DataError(f"column {column.name!r}: unseen category codes {sorted(set(codes[bad].tolist()))}")
        out[np.flatnonzero(live), codes.astype(np.int64)] = 1.0
    out[:, width] = mask
    return Tensor(out, dtype=dtype)


@dataclass
class EmbedParams:
    w_in: list[Tensor]
    w_out: list[Tensor]
    index: Tensor
    type: Tensor
    stats: EncodingStats = field(default=None)

    @classmethod
    def init(cls, schema: AttributeSchema, e: int, stats: EncodingStats, rng: DeterministicRng,
             dtype=None) -> "EmbedParams":
        dtype = dtype if dtype is not None else T.get_default_dtype()
        w_in, w_out = [], []
        for col in schema.columns:
            w_in.append(Tensor(glorot_uniform(col.width + 1, e, rng, dtype), requires_grad=True, dtype=dtype))
            w_out.append(Tensor(glorot_uniform(e, col.width, rng, dtype), requires_grad=True, dtype=dtype))
        index = Tensor(rng.normal(0.0, 0.02, (schema.d, e)).astype(dtype), requires_grad=True, dtype=dtype)
        kind = Tensor(rng.normal(0.0, 0.02, (2, e)).astype(dtype), requires_grad=True, dtype=dtype)
        return cls(w_in, w_out, index, kind, stats)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for j, w in enumerate(self.w_in):
            out[f"in.{j}"] = w
        for j, w in enumerate(self.w_out):
            out[f"out.{j}"] = w
        out["index"] = self.index
        out["type"] = self.type
        return out


def input_embed(x_input: np.ndarray, mask: np.ndarray, schema: AttributeSchema, params: EmbedParams) -> Tensor:
    """Embed every attribute to width ``e`` and stack into ``n x d x e``."""
    dtype = params.index.dtype
    cols = []
    for j, col in enumerate(schema.columns):
        enc = encode_column(x_input[:, j], mask[:, j], col, params.stats.mean[j], params.stats.std[j], dtype)
        h = T.matmul(enc, params.w_in[j])
        h = h + T.select(params.index, j, 0) + T.select(params.type, TYPE_INDEX[col.kind], 0)
        cols.append(h)
    return T.stack(cols, axis=1)


def output_embed(h_last: Tensor, params: EmbedParams) -> list[Tensor]:
    """Per-attribute predictions ``Z_j = H[:, j, :] W_out_j`` (no mask channel)."""
    return [T.matmul(T.select(h_last, j, 1), w) for j, w in enumerate(params.w_out)]


def decode_predictions(z: list, schema: AttributeSchema, stats: EncodingStats) -> np.ndarray:
    """Argmax class codes (lowest index wins ties) and de-standardised values."""
    n = (z[0].data if isinstance(z[0], Tensor) else np.asarray(z[0])).shape[0]
    out = np.zeros((n, schema.d), dtype=np.float64)
    for j, col in enumerate(schema.columns):
        zj = z[j].data if isinstance(z[j], Tensor) else np.asarray(z[j])
        if col.kind == CATEGORICAL:
            out[:, j] = np.argmax(zj, axis=1)
        else:
            out[:, j] = zj[:, 0].astype(np.float64) * stats.std[j] + stats.mean[j]
    return out
