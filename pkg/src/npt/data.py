"""Tables, CSV I/O, row splitting, minibatching, and synthetic lookup tasks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attention import ConfigError
from .embedding import CATEGORICAL, CONTINUOUS, AttributeSchema, Column, DataError
from .tensor import DeterministicRng

TRAIN, VAL, TEST, CONTEXT = "train", "val", "test", "context"
ROLES = (TRAIN, VAL, TEST, CONTEXT)


@dataclass
class DataTable:
    """Raw ``n x d`` values; categorical cells hold integer codes, missing cells NaN.

    ``roles`` labels each row train/val/test, or ``context`` for rows whose
    target is always revealed and never scored. ``groups`` (optional) ties
    rows that must share a minibatch.
    """

    values: np.ndarray
    schema: AttributeSchema
    roles: np.ndarray
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.roles = np.asarray(self.roles, dtype=object)
        if self.values.ndim != 2 or self.values.shape[1] != self.schema.d:
            raise DataError(f"values shape {self.values.shape} does not match schema width {self.schema.d}")
        if self.roles.shape != (self.values.shape[0],):
            raise DataError(f"roles length {self.roles.shape} != row count {self.values.shape[0]}")
        bad = set(self.roles.tolist()) - set(ROLES)
        if bad:
            raise DataError(f"unknown row roles {sorted(bad)}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def rows(self, *roles: str) -> np.ndarray:
        return np.flatnonzero(np.isin(self.roles, roles))

    def subset(self, rows) -> "DataTable":
        rows = np.asarray(rows, dtype=np.int64)
        groups = None if self.groups is None else self.groups[rows]
        return DataTable(self.values[rows], self.schema, self.roles[rows], groups)

    def with_roles(self, roles) -> "DataTable":
        return replace(self, roles=np.asarray(roles, dtype=object))


def load_csv(path, schema_path) -> DataTable:
    """Read a CSV whose header lists the schema's columns in order."""
    schema = AttributeSchema.load(schema_path)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        rows = [r for r in reader if r]
    extra = [c for c in (schema.role_column, schema.group_column) if c]
    attr_header = [h for h in header if h not in extra]
    for pos, (got, want) in enumerate(zip(attr_header, schema.names)):
        if got != want:
            raise DataError(f"{path}: header column {pos} is {got!r}, schema expects {want!r}")
    if len(attr_header) != schema.d:
        missing = schema.names[len(attr_header):] or attr_header[schema.d:]
        raise DataError(f"{path}: header/schema column mismatch at {missing!r}")
    for c in extra:
        if c not in header:
            raise DataError(f"{path}: schema names column {c!r} but the header lacks it")

    pos = {name: header.index(name) for name in header}
    n = len(rows)
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(r)} fields, expected {len(header)}")

    values = np.full((n, schema.d), np.nan)
    columns = []
    for j, col in enumerate(schema.columns):
        raw = [r[pos[col.name]].strip() for r in rows]
        if col.kind == CONTINUOUS:
            for i, cell in enumerate(raw):
                if cell == "":
                    continue
                try:
                    values[i, j] = float(cell)
                except ValueError:
                    raise DataError(f"{path}: column {col.name!r} row {i + 1}: cannot parse {cell!r}") from None
            columns.append(col)
        else:
            cats = col.categories
            if cats is None:
                cats = sorted({c for c in raw if c != ""})
            lookup = {c: k for k, c in enumerate(cats)}
            unseen = sorted({c for c in raw if c != "" and c not in lookup})
            if unseen:
                raise DataError(f"{path}: column {col.name!r}: unseen categories {unseen}")
            for i, cell in enumerate(raw):
                if cell != "":
                    values[i, j] = lookup[cell]
            columns.append(Column(col.name, col.kind, col.is_target, list(cats)))
    schema = AttributeSchema(columns, schema.role_column, schema.group_column)

    roles = np.array([TRAIN] * n, dtype=object)
    if schema.role_column:
        roles = np.array([r[pos[schema.role_column]].strip() for r in rows], dtype=object)
    groups = None
    if schema.group_column:
        groups = np.array([int(r[pos[schema.group_column]]) for r in rows], dtype=np.int64)
    return DataTable(values, schema, roles, groups)


def save_csv(table: DataTable, path, schema_path=None) -> None:
    """Write ``table`` (and optionally its schema) so that ``load_csv`` round-trips it."""
    schema = table.schema
    header = list(schema.names)
    if schema.role_column:
        header.append(schema.role_column)
    if schema.group_column:
        header.append(schema.group_column)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(table.n):
            row = []
            for j, col in enumerate(schema.columns):
                v = table.values[i, j]
                if np.isnan(v):
                    row.append("")
                elif col.kind == CATEGORICAL:
                    row.append(col.categories[int(v)])
                else:
                    row.append(repr(float(v)))
            if schema.role_column:
                row.append(table.roles[i])
            if schema.group_column:
                row.append(str(int(table.groups[i])))
            writer.writerow(row)
    if schema_path is not None:
        schema.save(schema_path)


def _split_sizes(n: int, fractions) -> tuple[int, int, int]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    return n - n_val - n_test, n_val, n_test


def split_rows(n: int, fractions=(0.7, 0.2, 0.1), seed: int = 0, cv_folds: int | None = None):
    """Shuffled train/val/test role assignment.

    With ``cv_folds`` a list of role vectors is returned; fold ``i`` tests on
    the ``i``-th of ``cv_folds`` disjoint chunks and draws its validation rows
    from the remainder.
    """
    n_train, n_val, n_test = _split_sizes(n, fractions)
    rng = DeterministicRng(seed, 17)
    perm = rng.permutation(n)
    if cv_folds is None:
        roles = np.empty(n, dtype=object)
        roles[perm[:n_train]] = TRAIN
        roles[perm[n_train:n_train + n_val]] = VAL
        roles[perm[n_train + n_val:]] = TEST
        return roles
    if cv_folds < 2 or cv_folds > n:
        raise ConfigError(f"cv_folds must lie in [2, n], got {cv_folds}")
    out = []
    for fold, test_rows in enumerate(np.array_split(perm, cv_folds)):
        rest = np.setdiff1d(perm, test_rows, assume_unique=True)
        rest = rest[rng.child(fold).permutation(rest.size)]
        roles = np.full(n, TRAIN, dtype=object)
        roles[test_rows] = TEST
        roles[rest[:min(n_val, rest.size)]] = VAL
        out.append(roles)
    return out


def make_batches(roles, batch_size: int, training: bool, rng: DeterministicRng, groups=None) -> list[np.ndarray]:
    """Partition row indices into minibatches.

    Training batches chunk a random permutation. Evaluation batches are
    stratified by role so each keeps roughly the global train/val/test mix.
    Rows sharing a ``groups`` id always land in the same batch.
    """
    roles = np.asarray(roles, dtype=object)
    n = roles.shape[0]
    if batch_size < 0:
        raise ConfigError(f"batch_size must be >= 0, got {batch_size}")
    if batch_size == 0 or batch_size >= n:
        return [np.arange(n)]

    if groups is None:
        unit_ids = np.arange(n)
    else:
        _, unit_ids = np.unique(np.asarray(groups), return_inverse=True)
    n_units = unit_ids.max() + 1
    members = [[] for _ in range(n_units)]
    for i, u in enumerate(unit_ids):
        members[u].append(i)
    unit_size = np.array([len(m) for m in members])
    n_batches = max(1, int(math.ceil(n / batch_size)))

    if training:
        order = rng.permutation(n_units)
        chunks = np.array_split(order, n_batches)
    else:
        signature = np.array(["|".join(sorted(roles[m])) for m in members], dtype=object)
        chunks = [[] for _ in range(n_batches)]
        offset = 0
        for sig in sorted(set(signature.tolist())):
            units = np.flatnonzero(signature == sig)
            units = units[rng.permutation(units.size)]
            # rotate the starting batch so remainders spread evenly across batches
            for b, part in enumerate(np.array_split(units, n_batches)):
                chunks[(b + offset) % n_batches].extend(part.tolist())
            offset += units.size % n_batches
        chunks = [np.array(c, dtype=np.int64) for c in chunks]

    batches = []
    for chunk in chunks:
        rows = np.sort(np.concatenate([np.array(members[u], dtype=np.int64) for u in chunk])) if len(chunk) else np.array([], dtype=np.int64)
        if rows.size == 0:
            continue
        if not training:
            present = set(roles[rows].tolist())
            if present and present <= {TEST, VAL}:
                raise RuntimeError("evaluation batch holds only val/test rows; no training rows to attend to")
        batches.append(rows)
    assert int(unit_size.sum()) == n
    return batches


def _zscore(x: np.ndarray) -> np.ndarray:
    return (x - x.mean(axis=0)) / x.std(axis=0)


def synthetic_regression_table(n: int, n_features: int, rng: DeterministicRng, noise: float = 1.0) -> DataTable:
    """Standardised features ~ N(0, 1) and a standardised nonlinear target with noise.

    The noise term is independent of the features, so no per-row function of
    the features predicts it.
    """
    if n_features < 1:
        raise ConfigError("need at least one feature")
    x = rng.normal(0.0, 1.0, (n, n_features))
    k = n_features
    signal = np.sin(x[:, 0]) + 0.5 * x[:, 1 % k] * x[:, 2 % k] + 0.3 * x[:, 3 % k] ** 2 + 0.5 * np.tanh(x[:, 4 % k])
    y = signal + noise * rng.normal(0.0, 1.0, n)
    values = np.column_stack([_zscore(x), _zscore(y[:, None])])
    columns = [Column(f"f{j}", CONTINUOUS) for j in range(n_features)] + [Column("target", CONTINUOUS, True)]
    return DataTable(values, AttributeSchema(columns), np.array([TRAIN] * n, dtype=object))


DUPLICATION_VARIANTS = ("plain", "random_features", "add_one", "both")


def make_duplication_task(table: DataTable, variant: str, rng: DeterministicRng) -> DataTable:
    """Append a revealed-target copy of every row.

    Rows ``0..n-1`` keep their roles; rows ``n..2n-1`` are ``context`` copies
    whose targets are visible and never scored. Row ``i`` and ``n + i`` share
    group ``i``. Values are assumed to be in standardised units.
    """
    if variant not in DUPLICATION_VARIANTS:
        raise ConfigError(f"unknown duplication variant {variant!r}; choose from {DUPLICATION_VARIANTS}")
    schema = table.schema
    target = schema.single_target()
    if schema.columns[target].kind != CONTINUOUS:
        raise ConfigError("the duplication task needs a continuous target")
    features = [j for j in range(schema.d) if j != target]
    n = table.n
    values = np.vstack([table.values, table.values])
    if variant in ("random_features", "both"):
        if len(features) < 4:
            raise ConfigError("random_features needs at least 4 feature columns")
        noisy = features[-3:]
        values[:, noisy] = rng.normal(1.0, 1.0, (2 * n, 3))
    if variant in ("add_one", "both"):
        values[n:, target] += 1.0
    roles = np.concatenate([table.roles, np.array([CONTEXT] * n, dtype=object)])
    groups = np.concatenate([np.arange(n), np.arange(n)])
    out_schema = AttributeSchema(list(schema.columns), schema.role_column or "role", schema.group_column or "group")
    return DataTable(values, out_schema, roles, groups)


def knn_oracle(train_x, train_y, test_x, k: int = 1, weighting: str = "uniform") -> np.ndarray:
    """Brute-force Euclidean k-NN regression."""
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if not 1 <= k <= train_x.shape[0]:
        raise ConfigError(f"k={k} must lie in [1, {train_x.shape[0]}]")
    if weighting not in ("uniform", "distance"):
        raise ConfigError(f"unknown weighting {weighting!r}")
    d2 = np.empty((test_x.shape[0], train_x.shape[0]))
    for start in range(0, test_x.shape[0], 256):
        diff = test_x[start:start + 256, None, :] - train_x[None, :, :]
        d2[start:start + 256] = (diff * diff).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    ys = train_y[nearest]
    if weighting == "uniform":
        return ys.mean(axis=1)
    dist = np.sqrt(np.take_along_axis(d2, nearest, axis=1))
    exact = dist == 0
    w = np.where(exact.any(axis=1, keepdims=True), exact.astype(float), 1.0 / np.where(exact, 1.0, dist))
    return (w * ys).sum(axis=1) / w.sum(axis=1)
