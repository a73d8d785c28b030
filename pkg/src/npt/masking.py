"""Mask matrices for the supported ML settings and BERT-style stochastic masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import ConfigError
from .data import CONTEXT, TEST, TRAIN, VAL, DataTable
from .embedding import CATEGORICAL, Column, EncodingStats
from .tensor import DeterministicRng

KEEP, MASK_OUT, RANDOMIZE = 0, 1, 2
MODES = ("supervised", "imputation", "semi-supervised")


@dataclass(frozen=True)
class MaskConfig:
    p_feature: float = 0.15
    p_target: float = 1.0
    mode: str = "supervised"
    mask_token_prob: float = 0.9
    randomize_prob: float = 0.1

    def __post_init__(self):
        for name in ("p_feature", "p_target", "mask_token_prob", "randomize_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.mask_token_prob + self.randomize_prob - 1.0) > 1e-12:
            raise ConfigError("mask_token_prob + randomize_prob must equal 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown masking mode {self.mode!r}; choose from {MODES}")


@dataclass
class MaskMatrix:
    """``bits`` is the input mask; ``loss`` marks entries scored this pass."""

    bits: np.ndarray
    loss: np.ndarray
    target_cols: np.ndarray

    @property
    def target_loss(self) -> np.ndarray:
        return self.loss & self.target_cols[None, :]

    @property
    def feature_loss(self) -> np.ndarray:
        return self.loss & ~self.target_cols[None, :]

    def loss_indices(self) -> list[tuple[int, int]]:
        return [tuple(ix) for ix in np.argwhere(self.loss).tolist()]

    def subset(self, rows) -> "MaskMatrix":
        return MaskMatrix(self.bits[rows], self.loss[rows], self.target_cols)


def apply_stochastic_mask(eligible, p_select, config: MaskConfig, rng: DeterministicRng) -> np.ndarray:
    """Per-entry action for eligible entries: ``KEEP``, ``MASK_OUT`` or ``RANDOMIZE``.

    Each eligible entry is selected with ``p_select`` (scalar or per-entry);
    a selected entry is masked out with ``mask_token_prob`` and randomized
    otherwise.
    """
    eligible = np.asarray(eligible, dtype=bool)
    selected = (rng.random(eligible.shape) < p_select) & eligible
    coin = rng.random(eligible.shape) < config.mask_token_prob
    actions = np.full(eligible.shape, KEEP, dtype=np.int8)
    actions[selected & coin] = MASK_OUT
    actions[selected & ~coin] = RANDOMIZE
    return actions


def random_values(column: Column, count: int, rng: DeterministicRng, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Replacement draws in raw units: a uniform class, or ``mean + std * N(0, 1)``."""
    if column.kind == CATEGORICAL:
        return rng.integers(0, column.width, count).astype(np.float64)
    return mean + std * rng.normal(0.0, 1.0, count)


def build_task_masks(
    table: DataTable,
    config: MaskConfig,
    rng: DeterministicRng,
    stats: EncodingStats,
    training: bool,
    score_roles=(TEST,),
) -> tuple[np.ndarray, MaskMatrix]:
    """Realise the model input and mask matrix for one pass over ``table``.

    Missing cells are always masked and never scored. Targets of val/test
    rows are always masked; ``context`` targets are always revealed. In a training pass, train-row targets are
    stochastically masked with ``p_target`` and features of train/context
    rows (all rows in semi-supervised mode) with ``p_feature``. In an
    evaluation pass, only targets of rows whose role is in ``score_roles``
    are scored.
    """
    schema = table.schema
    n, d = table.n, table.d
    if config.mode in ("supervised", "semi-supervised"):
        schema.single_target()
    target_cols = schema.target_mask if config.mode != "imputation" else np.zeros(d, dtype=bool)
    missing = table.missing
    x = np.where(missing, 0.0, table.values)
    bits = missing.copy()
    loss = np.zeros((n, d), dtype=bool)
    roles = table.roles

    held_out = np.isin(roles, (VAL, TEST))
    bits[np.ix_(held_out, target_cols)] = True

    if not training:
        scored = np.isin(roles, tuple(score_roles)) & held_out
        loss[np.ix_(scored, target_cols)] = True
        loss &= ~missing
        x[bits] = 0.0
        return x, MaskMatrix(bits, loss, target_cols)

    eligible = np.zeros((n, d), dtype=bool)
    p = np.zeros((n, d))
    feature_rows = np.isin(roles, (TRAIN, CONTEXT)) if config.mode != "semi-supervised" else np.ones(n, dtype=bool)
    eligible[np.ix_(feature_rows, ~target_cols)] = True
    p[:, ~target_cols] = config.p_feature
    train_rows = roles == TRAIN
    eligible[np.ix_(train_rows, target_cols)] = True
    p[:, target_cols] = config.p_target
    eligible &= ~missing

    actions = apply_stochastic_mask(eligible, p, config, rng)
    selected = actions != KEEP
    mask_out = actions == MASK_OUT
    randomize = actions == RANDOMIZE

    bits |= mask_out
    loss |= selected
    x[bits] = 0.0
    for j, col in enumerate(schema.columns):
        rows = np.flatnonzero(randomize[:, j])
        if rows.size:
            x[rows, j] = random_values(col, rows.size, rng, stats.mean[j], stats.std[j])
    return x, MaskMatrix(bits, loss, target_cols)


def loss_targets(table: DataTable, stats: EncodingStats) -> np.ndarray:
    """Ground truth in loss space: standardised continuous values, class codes."""
    out = table.values.copy()
    for j, col in enumerate(table.schema.columns):
        if col.kind != CATEGORICAL:
            out[:, j] = (out[:, j] - stats.mean[j]) / stats.std[j]
    return out
