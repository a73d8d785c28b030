"""Training loop and evaluation over (possibly minibatched) tables."""
from __future__ import annotations

import json
import math
from typing import Callable

import numpy as np

from .data import CONTEXT, TEST, TRAIN, VAL, DataTable, make_batches
from .embedding import CATEGORICAL, decode_predictions, fit_stats
from .masking import MaskConfig, build_task_masks, loss_targets
from .model import NPT, RunConfig, npt_loss, target_nll, tradeoff_lambda
from .optim import Optimizer, lr_at
from .tensor import DeterministicRng


def mask_config(config: RunConfig) -> MaskConfig:
    return MaskConfig(p_feature=config.p_feature, p_target=config.p_target, mode=config.mask_mode)


def build_model(table: DataTable, config: RunConfig) -> NPT:
    """Fit stats on the training rows of ``table`` and initialise a model."""
    train_rows = table.rows(TRAIN)
    if train_rows.size == 0:
        raise ValueError("table has no training rows")
    stats = fit_stats(table.values, table.schema, train_rows)
    return NPT(table.schema, stats, config)


def lambda_at(config: RunConfig, step: int) -> float:
    if config.lambda_schedule == "constant":
        return config.lambda_value
    return tradeoff_lambda(step, config.total_steps)


def _training_rows(table: DataTable, config: RunConfig) -> np.ndarray:
    if config.mask_mode == "supervised":
        return table.rows(TRAIN, CONTEXT)
    return np.arange(table.n)


def evaluate(model: NPT, table: DataTable, score_roles=(TEST,), seed: int = 0,
             batch_size: int | None = None) -> dict:
    """Deterministic eval pass; target loss/metrics over rows with ``score_roles``.

    Returns mean target NLL, RMSE in original units (continuous target) or
    accuracy (categorical target), the number of scored entries and the
    decoded predictions for every row.
    """
    config = model.config
    batch_size = config.batch_size if batch_size is None else batch_size
    rng = DeterministicRng(seed, 5)
    x_in, mask = build_task_masks(table, mask_config(config), rng, model.stats, training=False,
                                  score_roles=score_roles)
    x_true = loss_targets(table, model.stats)
    batches = make_batches(table.roles, batch_size, False, rng, table.groups)
    preds = np.full((table.n, table.d), np.nan)
    nll_total, count = 0.0, 0
    for rows in batches:
        z, _ = model.forward(x_in[rows], mask.bits[rows], train=False)
        s, c = target_nll(z, x_true[rows], mask.subset(rows), model.schema)
        nll_total += s
        count += c
        preds[rows] = decode_predictions(z, model.schema, model.stats)
    out = {"target_loss": nll_total / count if count else None, "n_scored": count, "predictions": preds}
    scored = mask.target_loss
    if count:
        j = model.schema.single_target() if model.config.mask_mode != "imputation" else None
        if j is not None:
            rows = np.flatnonzero(scored[:, j])
            truth = table.values[rows, j]
            if model.schema.columns[j].kind == CATEGORICAL:
                out["accuracy"] = float(np.mean(preds[rows, j] == truth))
            else:
                out["rmse"] = float(np.sqrt(np.mean((preds[rows, j] - truth) ** 2)))
    return out


def fit(model: NPT, table: DataTable | Callable[[int], DataTable], log: Callable[[dict], None] | None = None,
        val_table: DataTable | None = None, val_roles=(VAL,)) -> list[dict]:
    """Train ``model`` for ``config.total_steps`` optimizer steps.

    ``table`` may be a callable mapping the epoch index to a fresh table.
    Masks are resampled once per epoch. Every ``eval_every`` steps (and at
    the end) a metrics record is produced; validation uses ``val_table`` if
    given, else ``table`` itself scored on ``val_roles``.
    """
    config = model.config
    params = model.parameters()
    opt = Optimizer(params, config.betas, config.eps, config.weight_decay,
                    config.lookahead_alpha, config.lookahead_k, config.clip_norm)
    mcfg = mask_config(config)
    rng_mask = DeterministicRng(config.seed, 2)
    rng_drop = DeterministicRng(config.seed, 3)
    rng_batch = DeterministicRng(config.seed, 4)
    history = []
    epoch = 0
    running = []
    while model.step < config.total_steps:
        current = table(epoch) if callable(table) else table
        sub = current.subset(_training_rows(current, config))
        x_in, mask = build_task_masks(sub, mcfg, rng_mask, model.stats, training=True)
        x_true = loss_targets(sub, model.stats)
        for rows in make_batches(sub.roles, config.batch_size, True, rng_batch, sub.groups):
            if model.step >= config.total_steps:
                break
            bmask = mask.subset(rows)
            if not bmask.loss.any():
                continue
            lam = lambda_at(config, model.step)
            lr = lr_at(model.step, config.total_steps, config.lr, config.flat_fraction)
            model.zero_grad()
            z, _ = model.forward(x_in[rows], bmask.bits, train=True, rng=rng_drop)
            loss = npt_loss(z, x_true[rows], bmask, lam, model.schema)
            loss.backward()
            opt.step(lr)
            model.step += 1
            running.append(float(loss.data))
            if model.step % config.eval_every == 0 or model.step == config.total_steps:
                record = {"step": model.step, "lambda": lam, "lr": lr,
                          "train_loss": float(np.mean(running)), "val_target_loss": None, "epoch": epoch}
                running = []
                vt = val_table if val_table is not None else current
                if np.isin(vt.roles, val_roles).any():
                    record["val_target_loss"] = evaluate(model, vt, score_roles=val_roles)["target_loss"]
                history.append(record)
                if log is not None:
                    log(record)
        epoch += 1
    return history


def jsonl_logger(path):
    """Append one JSON object per metrics record to ``path``."""
    fh = open(path, "w")

    def log(record: dict) -> None:
        fh.write(json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in record.items()}) + "\n")
        fh.flush()

    log.close = fh.close
    return log
