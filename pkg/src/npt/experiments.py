"""The duplication-task recipe shared by the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TEST, DataTable, make_duplication_task, synthetic_regression_table
from .model import NPT, RunConfig
from .tensor import DeterministicRng
from .train import build_model, evaluate, fit


@dataclass(frozen=True)
class DuplicationSetup:
    n: int = 512
    n_features: int = 7
    variant: str = "plain"
    data_seed: int = 0
    test_seed: int = 99

    def train_table(self, epoch: int) -> DataTable:
        """A fresh realization per epoch; originals are training rows."""
        base = DeterministicRng(self.data_seed, 100)
        t = synthetic_regression_table(self.n, self.n_features, base.child(epoch))
        return make_duplication_task(t, self.variant, base.child(10**6 + epoch))

    def test_table(self) -> DataTable:
        """An unseen realization whose originals are all test rows."""
        t = synthetic_regression_table(self.n, self.n_features, DeterministicRng(self.test_seed, 0))
        t = t.with_roles(np.array([TEST] * self.n, dtype=object))
        return make_duplication_task(t, self.variant, DeterministicRng(self.test_seed, 1))


def duplication_config(**overrides) -> RunConfig:
    """Small NPT: 4 layers, 2 heads, e=16, minibatches of 64 rows (32 original/copy pairs)."""
    base = dict(layers=4, heads=2, embed_dim=16, dropout=0.0, lr=1e-2, batch_size=64,
                total_steps=16000, flat_fraction=0.7, eval_every=1000)
    base.update(overrides)
    return RunConfig(**base)


def train_duplication(setup: DuplicationSetup, config: RunConfig, log=None) -> NPT:
    model = build_model(setup.train_table(0), config)
    fit(model, setup.train_table, log=log)
    return model


def score_duplication(model: NPT, setup: DuplicationSetup, test: DataTable | None = None) -> dict:
    """RMSE and Pearson r between test predictions and the copies' revealed targets."""
    test = test if test is not None else setup.test_table()
    ev = evaluate(model, test)
    pred = ev["predictions"][:setup.n, -1]
    dup = test.values[setup.n:, -1]
    return {"rmse": float(np.sqrt(np.mean((pred - dup) ** 2))),
            "r": float(np.corrcoef(pred, dup)[0, 1]),
            "target_loss": ev["target_loss"]}
