import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npt import tensor as T
from npt.attention import ConfigError
from npt.data import TEST, TRAIN, VAL, make_duplication_task, split_rows, synthetic_regression_table
from npt.embedding import CATEGORICAL, CONTINUOUS, AttributeSchema, Column, EncodingStats
from npt.masking import MaskMatrix, build_task_masks, loss_targets
from npt.model import (NPT, CheckpointFormatError, RunConfig, load_checkpoint, npt_loss, save_checkpoint,
                       tradeoff_lambda)
from npt.tensor import DeterministicRng, Tensor
from npt.train import build_model, evaluate, fit, mask_config


def small_table(n=40, seed=0):
    t = synthetic_regression_table(n, 3, DeterministicRng(seed))
    return t.with_roles(split_rows(n, seed=seed))


def small_config(**kw):
    base = dict(layers=2, heads=2, embed_dim=4, dropout=0.0, total_steps=10, eval_every=5)
    base.update(kw)
    return RunConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(layers=3)
    with pytest.raises(ConfigError):
        RunConfig(heads=3, embed_dim=16)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"layers": 2, "bogus": 1})
    cfg = RunConfig(seed=5)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_tradeoff_lambda_schedule():
    assert tradeoff_lambda(0, 100) == 1.0
    assert math.isclose(tradeoff_lambda(50, 100), 0.5)
    assert math.isclose(tradeoff_lambda(100, 100), 0.0, abs_tol=1e-15)
    assert tradeoff_lambda(200, 100) == tradeoff_lambda(100, 100)


def z_and_mask(pred, truth, target_mask, feature_mask):
    z = [Tensor(np.array([[p]]), dtype=np.float64) for p in pred]
    loss = np.array([[*feature_mask, target_mask]])
    return z, np.array([truth]), MaskMatrix(loss.copy(), loss, np.array([False] * len(feature_mask) + [True]))


SCHEMA2 = AttributeSchema([Column("a", CONTINUOUS), Column("y", CONTINUOUS, True)])


def test_loss_single_entry_half_squared_error():
    z, x, m = z_and_mask([0.0, 1.0], [0.0, 0.0], True, [False])
    assert float(npt_loss(z, x, m, 0.0, SCHEMA2).data) == 0.5


def test_loss_lambda_extremes():
    z, x, m = z_and_mask([2.0, 1.0], [0.0, 0.0], True, [True])
    assert float(npt_loss(z, x, m, 0.0, SCHEMA2).data) == 0.5
    assert float(npt_loss(z, x, m, 1.0, SCHEMA2).data) == 2.0
    assert float(npt_loss(z, x, m, 0.25, SCHEMA2).data) == 0.75 * 0.5 + 0.25 * 2.0


def test_loss_categorical_cross_entropy():
    schema = AttributeSchema([Column("c", CATEGORICAL, True, ["a", "b"])])
    z = [Tensor(np.array([[0.0, 0.0]]), dtype=np.float64)]
    m = MaskMatrix(np.array([[True]]), np.array([[True]]), np.array([True]))
    assert math.isclose(float(npt_loss(z, np.array([[1.0]]), m, 0.0, schema).data), math.log(2.0))


def test_empty_target_set_warns():
    z, x, m = z_and_mask([2.0, 1.0], [0.0, 0.0], False, [True])
    with pytest.warns(RuntimeWarning):
        out = npt_loss(z, x, m, 0.5, SCHEMA2)
    assert float(out.data) == 0.5 * 2.0
    z, x, m = z_and_mask([2.0, 1.0], [0.0, 0.0], False, [False])
    with pytest.raises(ValueError):
        npt_loss(z, x, m, 0.5, SCHEMA2)


def model_inputs(seed=0, n=12):
    t = small_table(n, seed)
    cfg = small_config(dtype="float64")
    model = build_model(t, cfg)
    x, m = build_task_masks(t, mask_config(cfg), DeterministicRng(seed, 7), model.stats, training=True)
    return t, model, x, m


def test_forward_shapes_and_single_row():
    t, model, x, m = model_inputs()
    z, maps = model.forward(x, m.bits, capture_attention=True)
    assert [zi.shape for zi in z] == [(12, 1)] * 4
    assert len(maps.maps) == 4  # two layers, two heads each
    z1, _ = model.forward(x[:1], m.bits[:1])
    assert all(np.isfinite(zi.data).all() for zi in z1)


def test_identical_rows_identical_predictions():
    _, model, x, m = model_inputs()
    xs = np.repeat(x[:1], 5, axis=0)
    ms = np.repeat(m.bits[:1], 5, axis=0)
    z, _ = model.forward(xs, ms)
    for zi in z:
        assert np.allclose(zi.data, zi.data[0], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_model_row_equivariance(seed):
    _, model, x, m = model_inputs(seed % 7)
    perm = DeterministicRng(seed).permutation(x.shape[0])
    z, _ = model.forward(x, m.bits)
    zp, _ = model.forward(x[perm], m.bits[perm])
    for a, b in zip(z, zp):
        assert np.max(np.abs(a.data[perm] - b.data)) <= 1e-9


def test_ablated_model_has_no_cross_row_dependence():
    t = small_table(12)
    model = build_model(t, small_config(dtype="float64", ablate_abd=True))
    x, m = build_task_masks(t, mask_config(model.config), DeterministicRng(0), model.stats, training=False)
    z, _ = model.forward(x, m.bits)
    x2 = x.copy()
    x2[1:] = DeterministicRng(1).normal(0, 1, x2[1:].shape)
    z2, _ = model.forward(x2, m.bits)
    for a, b in zip(z, z2):
        assert np.array_equal(a.data[0], b.data[0])
    assert not any("abd" in k for k in model.parameters())


def test_loss_gradcheck_through_model():
    t, model, x, m = model_inputs(1, n=6)
    x_true = loss_targets(t, model.stats)
    name, p = "layers.0.abd.wq", model.parameters()["layers.0.abd.wq"]

    def f(_):
        z, _ = model.forward(x, m.bits)
        return npt_loss(z, x_true, m, 0.3, model.schema)

    assert T.gradcheck(f, p) < 1e-5


def test_training_reduces_loss():
    base = synthetic_regression_table(48, 4, DeterministicRng(2)).with_roles(split_rows(48, seed=2))
    t = make_duplication_task(base, "plain", DeterministicRng(3))
    cfg = small_config(total_steps=200, eval_every=20, lr=5e-3, lambda_schedule="constant", lambda_value=0.0)
    model = build_model(t, cfg)
    history = fit(model, t)
    assert history[-1]["train_loss"] < 0.5 * history[0]["train_loss"]
    assert model.step == 200


def test_training_is_deterministic(tmp_path):
    t = small_table(30)
    paths = []
    for i in range(2):
        model = build_model(t, small_config(dropout=0.1, total_steps=8))
        fit(model, t)
        paths.append(tmp_path / f"m{i}.nptc")
        save_checkpoint(model, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_checkpoint_round_trip(tmp_path):
    t = small_table(30)
    model = build_model(t, small_config(total_steps=6))
    fit(model, t)
    before = evaluate(model, t, score_roles=(VAL,))
    save_checkpoint(model, tmp_path / "a.nptc")
    loaded, cfg = load_checkpoint(tmp_path / "a.nptc")
    assert cfg == model.config and loaded.step == model.step
    after = evaluate(loaded, t, score_roles=(VAL,))
    assert before["target_loss"] == after["target_loss"]
    assert np.array_equal(before["predictions"], after["predictions"], equal_nan=True)
    save_checkpoint(loaded, tmp_path / "b.nptc")
    assert (tmp_path / "a.nptc").read_bytes() == (tmp_path / "b.nptc").read_bytes()


def test_checkpoint_layout(tmp_path):
    model = build_model(small_table(10), small_config())
    save_checkpoint(model, tmp_path / "m.nptc")
    raw = (tmp_path / "m.nptc").read_bytes()
    assert raw[:4] == b"NPTC"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(model.parameters())


def test_truncated_checkpoint(tmp_path):
    model = build_model(small_table(10), small_config())
    save_checkpoint(model, tmp_path / "m.nptc")
    raw = (tmp_path / "m.nptc").read_bytes()
    for cut in (2, 10, 40, len(raw) - 3):
        (tmp_path / "t.nptc").write_bytes(raw[:cut])
        with pytest.raises(CheckpointFormatError, match="offset"):
            load_checkpoint(tmp_path / "t.nptc")
    (tmp_path / "t.nptc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "t.nptc")
    (tmp_path / "t.nptc").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(tmp_path / "t.nptc")


def test_evaluate_scores_requested_roles():
    t = small_table(40)
    model = build_model(t, small_config())
    out = evaluate(model, t, score_roles=(TEST,))
    assert out["n_scored"] == int(np.sum(t.roles == TEST))
    assert out["rmse"] >= 0 and np.isfinite(out["target_loss"])
