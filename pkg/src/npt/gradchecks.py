"""Finite-difference checks for every op, layer type and the full loss (64-bit)."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .attention import MhsaParams, aba, abd, dot_product_attention, mhsa_block
from .data import make_duplication_task, synthetic_regression_table
from .masking import MaskConfig, build_task_masks, loss_targets
from .model import NPT, RunConfig, npt_loss
from .embedding import fit_stats
from .tensor import DeterministicRng, Tensor

TOLERANCE = 1e-5


def _fault(t: Tensor) -> Tensor:
    # identity forward, wrong backward: a negative control for the harness
    return Tensor._result(t.data, (t,), lambda g: (g * 1.1,))


def _leaf(rng: DeterministicRng, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True, dtype=np.float64)


def _weighted_sum(t: Tensor, rng: DeterministicRng) -> Tensor:
    # a fixed random projection makes every output entry matter
    w = Tensor(rng.normal(0.0, 1.0, t.shape), dtype=np.float64)
    return T.tsum(t * w)


def op_checks(seed: int = 0) -> dict[str, Callable[[Callable], float]]:
    """Named checks; each takes a wrapper applied to the op output and returns the error."""
    rng = DeterministicRng(seed, 40)
    checks: dict[str, Callable[[Callable], float]] = {}

    def add_check(name, build):
        sub = rng.child(len(checks) + 1)
        target_seed = 3000 + len(checks)

        def run(wrap):
            leaf, fn = build(sub)
            return T.gradcheck(lambda t: _weighted_sum(wrap(fn(t)), DeterministicRng(seed, target_seed)), leaf)

        checks[name] = run

    other = _leaf(rng.child(99), 3, 4)
    add_check("add", lambda r: (_leaf(r, 3, 4), lambda t: T.add(t, other)))
    add_check("add_broadcast", lambda r: (_leaf(r, 4), lambda t: T.add(other, t)))
    add_check("sub", lambda r: (_leaf(r, 3, 4), lambda t: T.sub(other, t)))
    add_check("mul", lambda r: (_leaf(r, 3, 4), lambda t: T.mul(t, other)))
    add_check("mul_broadcast", lambda r: (_leaf(r, 1, 4), lambda t: T.mul(other, t)))
    add_check("square", lambda r: (_leaf(r, 3, 4), T.square))
    mat = _leaf(rng.child(98), 4, 5)
    add_check("matmul_left", lambda r: (_leaf(r, 2, 3, 4), lambda t: T.matmul(t, mat)))
    add_check("matmul_right", lambda r: (_leaf(r, 4, 5), lambda t: T.matmul(_leaf(DeterministicRng(seed, 97), 2, 3, 4), t)))
    add_check("matmul_batched", lambda r: (_leaf(r, 2, 4, 3), lambda t: T.matmul(_leaf(DeterministicRng(seed, 96), 2, 3, 4), t)))
    add_check("tsum_axis", lambda r: (_leaf(r, 3, 4), lambda t: T.tsum(t, axis=1)))
    add_check("mean", lambda r: (_leaf(r, 3, 4), lambda t: T.reshape(T.mean(t), (1,))))
    add_check("reshape", lambda r: (_leaf(r, 3, 4), lambda t: T.reshape(t, (2, 6))))
    add_check("swapaxes", lambda r: (_leaf(r, 2, 3, 4), lambda t: T.swapaxes(t, -1, -2)))
    add_check("concat", lambda r: (_leaf(r, 3, 2), lambda t: T.concat([t, other, t], axis=-1)))
    add_check("stack", lambda r: (_leaf(r, 3, 4), lambda t: T.stack([t, other, t], axis=1)))
    add_check("select", lambda r: (_leaf(r, 3, 4, 2), lambda t: T.select(t, 2, 1)))
    add_check("take_rows", lambda r: (_leaf(r, 4, 3), lambda t: T.take_rows(t, [0, 2, 2, 3])))
    add_check("gather_last", lambda r: (_leaf(r, 4, 3), lambda t: T.gather_last(t, [0, 2, 1, 2])))
    add_check("softmax_last", lambda r: (_leaf(r, 3, 5), T.softmax_last))
    add_check("log_softmax_last", lambda r: (_leaf(r, 3, 5), T.log_softmax_last))
    add_check("gelu", lambda r: (_leaf(r, 3, 5), T.gelu))
    gain = _leaf(rng.child(95), 5)
    bias = _leaf(rng.child(94), 5)
    add_check("layer_norm", lambda r: (_leaf(r, 3, 5), lambda t: T.layer_norm(t, gain, bias)))
    add_check("layer_norm_gain", lambda r: (_leaf(r, 5), lambda t: T.layer_norm(_leaf(DeterministicRng(seed, 93), 3, 5), t, bias)))
    add_check("dropout", lambda r: (_leaf(r, 4, 5), lambda t: T.dropout(t, 0.3, True, DeterministicRng(seed, 92))))

    def attention_build(r):
        q = _leaf(r.child(1), 2, 4, 3)
        k = _leaf(r.child(2), 2, 5, 3)
        v = _leaf(r.child(3), 2, 5, 3)
        return q, lambda t: dot_product_attention(t, k, v)[0]

    def attention_kv(r):
        q = _leaf(r.child(1), 2, 4, 3)
        v = _leaf(r.child(3), 2, 5, 3)
        return _leaf(r.child(2), 2, 5, 3), lambda t: dot_product_attention(q, t, v)[0]

    add_check("attention_q", attention_build)
    add_check("attention_k", attention_kv)

    def block(kind):
        def build(r):
            params = MhsaParams.init(8 if kind != "aba" else 4, 2, r.child(1), np.float64)
            for p in params.named_tensors().values():
                p.data += 0.1 * r.child(2).normal(0.0, 1.0, p.shape)
            if kind == "mhsa":
                return _leaf(r.child(3), 5, 8), lambda t: mhsa_block(t, params)
            if kind == "abd":
                return _leaf(r.child(3), 5, 2, 4), lambda t: abd(t, params)
            return _leaf(r.child(3), 5, 3, 4), lambda t: aba(t, params)
        return build

    add_check("mhsa_block", block("mhsa"))
    add_check("abd", block("abd"))
    add_check("aba", block("aba"))
    return checks


def toy_model(config: RunConfig | None = None, seed: int = 0):
    """A float64 NPT on a tiny duplication table plus the pieces of one training pass."""
    config = config or RunConfig(layers=2, heads=2, embed_dim=4, dropout=0.0, dtype="float64")
    base = DeterministicRng(seed, 41)
    table = make_duplication_task(synthetic_regression_table(5, 4, base.child(0)), "plain", base.child(1))
    stats = fit_stats(table.values, table.schema, np.arange(table.n))
    model = NPT(table.schema, stats, config, DeterministicRng(seed, 42))
    x_in, mask = build_task_masks(table, MaskConfig(p_feature=0.3), base.child(2), stats, training=True)
    return model, table, x_in, mask, loss_targets(table, stats)


def loss_checks(config: RunConfig | None = None, seed: int = 0) -> dict[str, Callable[[Callable], float]]:
    """One check per model parameter tensor through the full NPT loss."""
    model, table, x_in, mask, x_true = toy_model(config, seed)
    checks = {}
    for name, p in model.parameters().items():
        def run(wrap, p=p):
            def f(_):
                z, _ = model.forward(x_in, mask.bits, train=False)
                return wrap(npt_loss(z, x_true, mask, 0.4, table.schema))
            return T.gradcheck(f, p)
        checks[f"loss:{name}"] = run
    return checks


def run_all(config: RunConfig | None = None, fault: str | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error per check. ``fault`` names a check whose gradient is deliberately broken."""
    checks = {**op_checks(seed), **loss_checks(config, seed)}
    if fault is not None and fault not in checks:
        raise KeyError(f"unknown check {fault!r}")
    with T.default_dtype(np.float64):
        return {name: fn(_fault if name == fault else (lambda t: t)) for name, fn in checks.items()}
