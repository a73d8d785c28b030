"""Interaction probes: data corruption, data deletion, distance statistics,
equivariance checks and the parametric (no-ABD) ablation."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .attention import ConfigError
from .data import TEST, DataTable, make_batches
from .embedding import CATEGORICAL
from .masking import build_task_masks, loss_targets
from .model import NPT, RunConfig, target_nll
from .tensor import DeterministicRng
from .train import mask_config


def probe_workers(limit: int | None = None) -> int:
    """Worker count for probes, capped by the ``NPT_THREADS`` env var."""
    raw = os.environ.get("NPT_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"NPT_THREADS must be a positive integer, got {raw!r}") from None
    return cap if limit is None else max(1, min(cap, limit))


def _fan_out(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def parametric_ablation(config: RunConfig) -> RunConfig:
    """Same config with every ABD layer replaced by the identity."""
    return replace(config, ablate_abd=True)


def equivariance_check(model: NPT, x_input: np.ndarray, mask: np.ndarray, num_perms: int,
                       rng: DeterministicRng) -> float:
    """Max over random row permutations of ``|f(PX, PM) - P f(X, M)|``."""
    z, _ = model.forward(x_input, mask, train=False)
    base = np.concatenate([t.data for t in z], axis=1)
    worst = 0.0
    for _ in range(num_perms):
        perm = rng.permutation(x_input.shape[0])
        zp, _ = model.forward(x_input[perm], mask[perm], train=False)
        out = np.concatenate([t.data for t in zp], axis=1)
        worst = max(worst, float(np.max(np.abs(out - base[perm]))))
    return worst


def _target_output(model: NPT, x_input, mask, row: int) -> np.ndarray:
    """Raw model output for ``row``'s target: de-standardised value or class probabilities."""
    j = model.schema.single_target()
    z, _ = model.forward(x_input, mask, train=False)
    out = z[j].data[row].astype(np.float64)
    if model.schema.columns[j].kind == CATEGORICAL:
        e = np.exp(out - out.max())
        return e / e.sum()
    return out * model.stats.std[j] + model.stats.mean[j]


def permute_except(x_input: np.ndarray, mask: np.ndarray, keep_row: int, rng: DeterministicRng):
    """Independently permute every column over all rows but ``keep_row``.

    Value and mask bit move together, so each column keeps its multiset of
    entries and ``keep_row`` is untouched.
    """
    x = x_input.copy()
    m = mask.copy()
    others = np.delete(np.arange(x.shape[0]), keep_row)
    for j in range(x.shape[1]):
        perm = others[rng.permutation(others.size)]
        x[others, j] = x_input[perm, j]
        m[others, j] = mask[perm, j]
    return x, m


@dataclass
class CorruptionResult:
    clean_loss: float
    corrupted_loss: float
    clean_metric: float
    corrupted_metric: float
    metric: str
    n_rows: int

    @property
    def delta(self) -> float:
        return self.corrupted_metric - self.clean_metric


def corruption_eval(model: NPT, table: DataTable, score_roles=(TEST,), seed: int = 0,
                    batch_size: int | None = None, max_rows: int | None = None) -> CorruptionResult:
    """Clean vs corrupted target loss and metric over the scored rows of ``table``.

    For each scored row ``k`` of each evaluation batch, every column of the
    other rows in the batch is shuffled independently and the loss is read
    off at ``k``'s target. ``max_rows`` keeps only the first scored rows
    (in batch order) to bound cost.
    """
    j = model.schema.single_target()
    categorical = model.schema.columns[j].kind == CATEGORICAL
    batch_size = model.config.batch_size if batch_size is None else batch_size
    rng = DeterministicRng(seed, 5)
    x_in, mask = build_task_masks(table, mask_config(model.config), rng, model.stats, training=False,
                                  score_roles=score_roles)
    x_true = loss_targets(table, model.stats)
    jobs = []
    for rows in make_batches(table.roles, batch_size, False, rng, table.groups):
        for local in np.flatnonzero(mask.target_loss[rows, j]):
            jobs.append((rows, int(local)))
    if max_rows is not None:
        jobs = jobs[:max_rows]
    if not jobs:
        raise ValueError("no scored rows to corrupt")
    row_rng = DeterministicRng(seed, 6)

    def one(job):
        rows, k = job
        xb, mb = x_in[rows], mask.bits[rows]
        sub = mask.subset(rows)
        only_k = np.zeros_like(sub.loss)
        only_k[k, j] = True
        sub = type(sub)(sub.bits, only_k, sub.target_cols)
        z, _ = model.forward(xb, mb, train=False)
        clean, _ = target_nll(z, x_true[rows], sub, model.schema)
        clean_pred = z[j].data[k]
        xc, mc = permute_except(xb, mb, k, row_rng.child(int(rows[k])))
        zc, _ = model.forward(xc, mc, train=False)
        corr, _ = target_nll(zc, x_true[rows], sub, model.schema)
        return clean, corr, clean_pred.copy(), zc[j].data[k].copy(), table.values[rows[k], j]

    results = _fan_out(one, jobs, probe_workers(len(jobs)))
    clean_loss = float(np.mean([r[0] for r in results]))
    corr_loss = float(np.mean([r[1] for r in results]))
    truth = np.array([r[4] for r in results])
    if categorical:
        clean_metric = float(np.mean([np.argmax(r[2]) == t for r, t in zip(results, truth)]))
        corr_metric = float(np.mean([np.argmax(r[3]) == t for r, t in zip(results, truth)]))
        metric = "accuracy"
    else:
        mu, sd = model.stats.mean[j], model.stats.std[j]
        clean_pred = np.array([float(r[2][0]) for r in results]) * sd + mu
        corr_pred = np.array([float(r[3][0]) for r in results]) * sd + mu
        clean_metric = float(np.sqrt(np.mean((clean_pred - truth) ** 2)))
        corr_metric = float(np.sqrt(np.mean((corr_pred - truth) ** 2)))
        metric = "rmse"
    return CorruptionResult(clean_loss, corr_loss, clean_metric, corr_metric, metric, len(results))


@dataclass(frozen=True)
class DeletionParams:
    delta_max: float = 0.1
    delta_it: float = 0.01
    max_retry: int = 50
    eps: float = 0.02
    growth: float = 1.1

    def __post_init__(self):
        if min(self.delta_max, self.delta_it, self.max_retry, self.eps, self.growth) <= 0:
            raise ConfigError("deletion parameters must all be positive")
        if self.eps >= 1:
            raise ConfigError("eps must be < 1")


def prediction_change(new: np.ndarray, ref: np.ndarray) -> float:
    """Relative change for a regression output, L1 distance for class probabilities."""
    new = np.atleast_1d(new)
    ref = np.atleast_1d(ref)
    if ref.size == 1:
        return float(abs(new[0] - ref[0]) / max(abs(ref[0]), 1e-8))
    return float(np.abs(new - ref).sum())


def deletion_experiment(model: NPT, x_input: np.ndarray, mask: np.ndarray, i_star: int,
                        params: DeletionParams = DeletionParams(), rng: DeterministicRng | None = None,
                        trace: list | None = None) -> np.ndarray:
    """Greedy random deletion of rows that barely move the prediction at ``i_star``.

    Returns the sorted remaining rows (``i_star`` excluded). If ``trace`` is
    a list, the remaining-set size is appended after every proposal.
    """
    rng = rng or DeterministicRng(0, 7)
    n = x_input.shape[0]
    y_hat = _target_output(model, x_input, mask, i_star)
    remaining = [i for i in range(n) if i != i_star]
    delta_it = params.delta_it
    retries = 0
    while remaining and len(remaining) >= params.eps * n:
        c = remaining[int(rng.integers(0, len(remaining)))]
        keep = sorted([r for r in remaining if r != c] + [i_star])
        local = keep.index(i_star)
        y_prop = _target_output(model, x_input[keep], mask[keep], local)
        change = prediction_change(y_prop, y_hat)
        if change < delta_it:
            if change < params.delta_max:
                remaining.remove(c)
                retries = 0
            else:
                break
        else:
            retries += 1
        if retries >= params.max_retry:
            delta_it *= params.growth
            retries = 0
        if trace is not None:
            trace.append(len(remaining))
    return np.array(sorted(remaining), dtype=np.int64)


def _mean_sq_dist(features: np.ndarray, i_star: int, rows) -> float | None:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return None
    diff = features[rows] - features[i_star]
    return float(np.mean(np.nansum(diff * diff, axis=1)))


def deletion_distance_stats(features: np.ndarray, i_star: int, kept, deleted, rng: DeterministicRng):
    """Mean squared feature distance from ``i_star`` to the kept, deleted and random sets.

    The random control deletes ``len(deleted)`` rows uniformly at random
    from the same candidate pool (kept + deleted) and measures distance to
    what remains. Empty sets give ``None``.
    """
    kept = np.asarray(kept, dtype=np.int64)
    deleted = np.asarray(deleted, dtype=np.int64)
    pool = np.sort(np.concatenate([kept, deleted]))
    random_kept = np.sort(rng.permutation(pool)[deleted.size:]) if pool.size else pool
    return (_mean_sq_dist(features, i_star, kept), _mean_sq_dist(features, i_star, deleted),
            _mean_sq_dist(features, i_star, random_kept))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass
class SignedRankResult:
    w: float
    p: float
    n: int
    z: float | None = None


def signed_rank_statistic(pairs) -> tuple[float, int, float, float]:
    """``(W, n, null mean, null variance)`` for the differences ``a - b``.

    ``W`` is the rank sum of positive differences after dropping zeros;
    ties share their average rank and the variance carries the tie
    correction. Defined for any ``n``, including 0.
    """
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    diff = pairs[:, 0] - pairs[:, 1]
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        return 0.0, 0, 0.0, 0.0
    abs_d = np.abs(diff)
    w = float(_average_ranks(abs_d)[diff > 0].sum())
    _, counts = np.unique(abs_d, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    return w, n, n * (n + 1) / 4.0, var


def signed_rank_test(pairs) -> SignedRankResult:
    """Wilcoxon signed-rank test of ``H1: median(a) < median(b)``.

    Small ``w`` favours the alternative. ``p`` is the lower-tail normal
    approximation with the tie-corrected variance and no continuity
    correction. All-zero differences give ``p = 1``.
    """
    w, n, mean, var = signed_rank_statistic(pairs)
    if n == 0:
        return SignedRankResult(0.0, 1.0, 0, None)
    if n < 6:
        raise ValueError(f"need at least 6 non-zero differences for the normal approximation, got {n}")
    z = (w - mean) / math.sqrt(var)
    return SignedRankResult(w, float(ndtr(z)), n, float(z))


@dataclass
class DeletionPoint:
    row: int
    n_kept: int
    n_deleted: int
    d_kept: float | None
    d_deleted: float | None
    d_random: float | None


@dataclass
class ProbeReport:
    """Probe outputs. Corruption ``delta`` is corrupted minus clean metric."""

    corruption: dict | None = None
    deletion: list = field(default_factory=list)
    kept_vs_random: dict | None = None
    kept_vs_deleted: dict | None = None
    equivariance: float | None = None

    def to_dict(self) -> dict:
        return {
            "corruption": self.corruption,
            "deletion": [asdict(p) for p in self.deletion],
            "kept_vs_random": self.kept_vs_random,
            "kept_vs_deleted": self.kept_vs_deleted,
            "equivariance_max_deviation": self.equivariance,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def corruption_report(result: CorruptionResult) -> dict:
    out = asdict(result)
    out["delta"] = result.delta
    return out


def deletion_probe(model: NPT, table: DataTable, score_roles=(TEST,), seed: int = 0,
                   batch_size: int | None = None, max_points: int | None = None,
                   params: DeletionParams = DeletionParams()) -> ProbeReport:
    """Run the deletion experiment for scored rows and compare kept vs random/deleted distances."""
    j = model.schema.single_target()
    feat_cols = [c for c in range(table.d) if c != j]
    features = loss_targets(table, model.stats)[:, feat_cols]
    batch_size = model.config.batch_size if batch_size is None else batch_size
    rng = DeterministicRng(seed, 5)
    x_in, mask = build_task_masks(table, mask_config(model.config), rng, model.stats, training=False,
                                  score_roles=score_roles)
    jobs = []
    for rows in make_batches(table.roles, batch_size, False, rng, table.groups):
        for local in np.flatnonzero(mask.target_loss[rows, j]):
            jobs.append((rows, int(local)))
    if max_points is not None:
        jobs = jobs[:max_points]
    base = DeterministicRng(seed, 8)

    def one(job):
        rows, k = job
        row_rng = base.child(int(rows[k]))
        kept = deletion_experiment(model, x_in[rows], mask.bits[rows], k, params, row_rng.child(0))
        others = np.delete(np.arange(rows.size), k)
        deleted = np.setdiff1d(others, kept)
        d_k, d_d, d_r = deletion_distance_stats(features[rows], k, kept, deleted, row_rng.child(1))
        return DeletionPoint(int(rows[k]), int(kept.size), int(deleted.size), d_k, d_d, d_r)

    points = _fan_out(one, jobs, probe_workers(len(jobs)))
    report = ProbeReport(deletion=points)
    for key, other in (("kept_vs_random", "d_random"), ("kept_vs_deleted", "d_deleted")):
        pairs = [(p.d_kept, getattr(p, other)) for p in points
                 if p.d_kept is not None and getattr(p, other) is not None]
        try:
            res = signed_rank_test(pairs)
            setattr(report, key, asdict(res))
        except ValueError as exc:
            setattr(report, key, {"error": str(exc), "n": len(pairs)})
    return report


def intervene_target(model: NPT, x_input: np.ndarray, mask: np.ndarray, source_row: int, query_row: int,
                     values) -> np.ndarray:
    """Predictions at ``query_row`` as ``source_row``'s revealed target is set to each value.

    ``values`` are in original units; the source target is unmasked.
    """
    j = model.schema.single_target()
    out = []
    for v in values:
        x = x_input.copy()
        m = mask.copy()
        x[source_row, j] = v
        m[source_row, j] = False
        out.append(float(_target_output(model, x, m, query_row)[0]))
    return np.array(out)


def attention_maps(model: NPT, table: DataTable, seed: int = 0):
    """ABD/ABA attention weights for one evaluation pass over the whole of ``table``."""
    rng = DeterministicRng(seed, 5)
    x_in, mask = build_task_masks(table, mask_config(model.config), rng, model.stats, training=False)
    _, maps = model.forward(x_in, mask.bits, train=False, capture_attention=True)
    return maps
