import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.neighbors import KNeighborsRegressor

from npt.attention import ConfigError
from npt.data import (CONTEXT, TEST, TRAIN, VAL, DataTable, knn_oracle, load_csv, make_batches,
                      make_duplication_task, save_csv, split_rows, synthetic_regression_table)
from npt.embedding import CATEGORICAL, CONTINUOUS, AttributeSchema, Column, DataError
from npt.tensor import DeterministicRng


def write(tmp_path, text, schema):
    (tmp_path / "d.csv").write_text(text)
    schema.save(tmp_path / "s.json")
    return tmp_path / "d.csv", tmp_path / "s.json"


def test_csv_parse_with_missing_and_categories(tmp_path):
    schema = AttributeSchema([Column("x", CONTINUOUS), Column("c", CATEGORICAL, categories=["lo", "hi"])])
    t = load_csv(*write(tmp_path, "x,c\n1.5,hi\n,lo\n-2,\n", schema))
    assert t.values[0].tolist() == [1.5, 1.0]
    assert np.isnan(t.values[1, 0]) and t.values[1, 1] == 0.0
    assert np.isnan(t.values[2, 1])
    assert t.missing.sum() == 2


def test_csv_infers_sorted_categories(tmp_path):
    schema = AttributeSchema([Column("c", CATEGORICAL)])
    t = load_csv(*write(tmp_path, "c\nb\na\nb\n", schema))
    assert t.schema.columns[0].categories == ["a", "b"]
    assert t.values[:, 0].tolist() == [1.0, 0.0, 1.0]


def test_csv_header_mismatch(tmp_path):
    schema = AttributeSchema([Column("x", CONTINUOUS), Column("y", CONTINUOUS)])
    with pytest.raises(DataError, match="y"):
        load_csv(*write(tmp_path, "x,z\n1,2\n", schema))
    with pytest.raises(DataError):
        load_csv(*write(tmp_path, "x\n1\n", schema))


def test_csv_bad_cells(tmp_path):
    schema = AttributeSchema([Column("x", CONTINUOUS)])
    with pytest.raises(DataError, match="abc"):
        load_csv(*write(tmp_path, "x\nabc\n", schema))
    cat = AttributeSchema([Column("c", CATEGORICAL, categories=["a", "b"])])
    with pytest.raises(DataError, match="zz"):
        load_csv(*write(tmp_path, "c\nzz\n", cat))


def test_missing_data_file(tmp_path):
    AttributeSchema([Column("x", CONTINUOUS)]).save(tmp_path / "s.json")
    with pytest.raises(FileNotFoundError, match="gone.csv"):
        load_csv(tmp_path / "gone.csv", tmp_path / "s.json")


def test_csv_round_trip_with_roles_and_groups(tmp_path):
    base = synthetic_regression_table(12, 4, DeterministicRng(0))
    base = base.with_roles(split_rows(12, seed=1))
    t = make_duplication_task(base, "plain", DeterministicRng(1))
    save_csv(t, tmp_path / "d.csv", tmp_path / "s.json")
    back = load_csv(tmp_path / "d.csv", tmp_path / "s.json")
    assert np.array_equal(back.values, t.values)
    assert back.roles.tolist() == t.roles.tolist()
    assert np.array_equal(back.groups, t.groups)


def test_split_sizes_and_determinism():
    roles = split_rows(10, (0.7, 0.2, 0.1), seed=3)
    assert [int(np.sum(roles == r)) for r in (TRAIN, VAL, TEST)] == [7, 2, 1]
    assert np.array_equal(roles, split_rows(10, seed=3))
    assert not np.array_equal(split_rows(100, seed=3), split_rows(100, seed=4))
    with pytest.raises(ConfigError):
        split_rows(10, (0.5, 0.2, 0.2))


def test_cv_folds_partition_rows():
    folds = split_rows(23, seed=0, cv_folds=5)
    assert len(folds) == 5
    tested = np.concatenate([np.flatnonzero(r == TEST) for r in folds])
    assert sorted(tested.tolist()) == list(range(23))
    for roles in folds:
        assert not np.any((roles == VAL) & (roles == TEST))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 120), st.integers(1, 40), st.booleans(), st.integers(0, 1000))
def test_batches_partition_rows(n, bs, training, seed):
    roles = np.array([TRAIN] * n, dtype=object)
    batches = make_batches(roles, bs, training, DeterministicRng(seed))
    rows = np.concatenate(batches)
    assert sorted(rows.tolist()) == list(range(n))


def test_groups_share_batches():
    n = 40
    roles = np.array([TRAIN] * 20 + [CONTEXT] * 20, dtype=object)
    groups = np.concatenate([np.arange(20), np.arange(20)])
    for training in (True, False):
        batches = make_batches(roles, 8, training, DeterministicRng(1), groups)
        home = {}
        for b, rows in enumerate(batches):
            for g in groups[rows]:
                assert home.setdefault(int(g), b) == b
        assert sum(len(b) for b in batches) == n


def test_eval_batches_stratified():
    n = 1000
    roles = split_rows(n, seed=2)
    batches = make_batches(roles, 100, False, DeterministicRng(2))
    for rows in batches:
        for role, frac in ((TRAIN, 0.7), (VAL, 0.2), (TEST, 0.1)):
            share = np.mean(roles[rows] == role)
            assert abs(share - frac) <= 0.1 * frac + 1e-9


def test_full_batch():
    assert [b.tolist() for b in make_batches(np.array([TRAIN] * 3, dtype=object), 0, True, DeterministicRng(0))] \
        == [[0, 1, 2]]


def test_synthetic_table_standardised():
    t = synthetic_regression_table(512, 7, DeterministicRng(0))
    assert t.values.shape == (512, 8)
    assert np.allclose(t.values.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(t.values.std(axis=0), 1, atol=1e-12)
    assert t.schema.single_target() == 7


@pytest.mark.parametrize("variant", ["plain", "random_features", "add_one", "both"])
def test_duplication_variants(variant):
    base = synthetic_regression_table(30, 7, DeterministicRng(1)).with_roles(split_rows(30, seed=0))
    t = make_duplication_task(base, variant, DeterministicRng(2))
    assert t.n == 60
    assert t.roles[30:].tolist() == [CONTEXT] * 30
    assert t.roles[:30].tolist() == base.roles.tolist()
    assert np.array_equal(t.groups[:30], t.groups[30:])
    shift = t.values[30:, 7] - t.values[:30, 7]
    assert np.allclose(shift, 1.0 if variant in ("add_one", "both") else 0.0)
    noisy = variant in ("random_features", "both")
    assert np.array_equal(t.values[30:, :4], t.values[:30, :4])
    assert np.array_equal(t.values[30:, 4:7], t.values[:30, 4:7]) != noisy


def test_random_features_needs_four_features():
    base = synthetic_regression_table(10, 3, DeterministicRng(0))
    with pytest.raises(ConfigError):
        make_duplication_task(base, "random_features", DeterministicRng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.sampled_from(["uniform", "distance"]), st.integers(0, 1000))
def test_knn_matches_sklearn(k, weighting, seed):
    rng = DeterministicRng(seed)
    tx, ty, qx = rng.normal(0, 1, (30, 3)), rng.normal(0, 1, 30), rng.normal(0, 1, (12, 3))
    ref = KNeighborsRegressor(n_neighbors=k, weights=weighting, algorithm="brute").fit(tx, ty).predict(qx)
    assert np.allclose(knn_oracle(tx, ty, qx, k, weighting), ref, atol=1e-12)


def test_knn_exact_cases():
    rng = DeterministicRng(0)
    x, y = rng.normal(0, 1, (20, 3)), rng.normal(0, 1, 20)
    assert np.array_equal(knn_oracle(x, y, x, 1), y)
    assert np.allclose(knn_oracle(x, y, rng.normal(0, 1, (5, 3)), 20), y.mean())
    with pytest.raises(ConfigError):
        knn_oracle(x, y, x, 21)


def test_knn_add_one_residual_is_one():
    base = synthetic_regression_table(50, 7, DeterministicRng(3))
    t = make_duplication_task(base, "add_one", DeterministicRng(4))
    feat = list(range(7))
    pred = knn_oracle(t.values[50:, feat], t.values[50:, 7], t.values[:50, feat], 1)
    assert np.allclose(pred - t.values[:50, 7], 1.0, atol=1e-12)


def test_table_validation():
    schema = AttributeSchema([Column("x", CONTINUOUS)])
    with pytest.raises(DataError):
        DataTable(np.zeros((2, 2)), schema, np.array([TRAIN] * 2, dtype=object))
    with pytest.raises(DataError):
        DataTable(np.zeros((2, 1)), schema, np.array([TRAIN, "bogus"], dtype=object))
