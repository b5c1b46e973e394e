import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chn.data import (BimodalDataset, build_similarity, generate_synthetic, load_dataset,
                      load_features, load_labels, load_split, make_split, save_dataset,
                      save_features, save_labels)
from chn.errors import ConfigError, ParseError, ShapeError


def test_zero_noise_single_label_features_coincide():
    ds = generate_synthetic(60, 5, 7, 3, noise=0.0, seed=1, multi_label_prob=0.0)
    assert np.all(ds.labels.sum(axis=1) == 1)
    for c in range(3):
        rows = ds.image_features[ds.labels[:, c] == 1]
        assert np.allclose(rows, rows[0])


def test_generation_is_seeded():
    a = generate_synthetic(50, 4, 6, 3, seed=5)
    b = generate_synthetic(50, 4, 6, 3, seed=5)
    assert np.array_equal(a.image_features, b.image_features)
    assert np.array_equal(a.text_features, b.text_features)
    assert np.array_equal(a.labels, b.labels)


def test_generation_shapes_and_values():
    ds = generate_synthetic(200, 8, 9, 4, seed=0)
    assert ds.image_features.shape == (200, 8) and ds.text_features.shape == (200, 9)
    assert set(np.unique(ds.text_features)) <= {0.0, 1.0}
    assert np.all((ds.labels.sum(axis=1) >= 1) & (ds.labels.sum(axis=1) <= 2))
    with pytest.raises(ConfigError):
        generate_synthetic(10, 2, 2, 1)


def test_dataset_validation():
    with pytest.raises(ShapeError):
        BimodalDataset(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        BimodalDataset(np.full((2, 2), np.inf), np.zeros((2, 2)), np.zeros((2, 1)))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 200), seed=st.integers(0, 10 ** 6), data=st.data())
def test_split_partitions_items(n, seed, data):
    q = data.draw(st.integers(0, n - 2))
    v = data.draw(st.integers(0, n - 1 - q - 1))
    s = make_split(n, q, v, seed)
    allidx = np.sort(np.concatenate([s.train, s.query, s.val]))
    assert np.array_equal(allidx, np.arange(n))
    assert len(s.query) == q and len(s.val) == v


def test_split_rejects_empty_train():
    with pytest.raises(ConfigError):
        make_split(10, 5, 5)


def test_similarity_all_same_class_flags_balance():
    labels = np.ones((20, 1), dtype=int)
    S = build_similarity(labels, 30, balance=0.5, seed=0)
    assert np.all(S.s == 1) and len(S) == 30
    assert S.warning


def test_similarity_two_classes_half_positive():
    labels = np.eye(2, dtype=int)[np.arange(100) % 2]
    fracs = []
    for seed in range(10):
        S = build_similarity(labels, 200, balance=0.5, seed=seed)
        fracs.append(np.mean(S.s == 1))
        assert S.warning is None
    assert abs(np.mean(fracs) - 0.5) < 0.02


def test_similarity_budget_exact_and_distinct():
    labels = np.eye(3, dtype=int)[np.arange(100) % 3]
    S = build_similarity(labels, 10, seed=3)
    keys = {(int(i), int(j)) for i, j in zip(S.i, S.j)}
    assert len(S) == 10 and len(keys) == 10
    assert all(i < j for i, j in keys)
    # signs follow the shared-label rule
    for i, j, s in zip(S.i, S.j, S.s):
        assert s == (1 if labels[i] @ labels[j] > 0 else -1)


def test_similarity_budget_over_capacity():
    S = build_similarity(np.eye(2, dtype=int)[[0, 1, 0]], 10, seed=0)
    assert len(S) == 3 and S.warning


def test_file_round_trip(tmp_path):
    ds = generate_synthetic(30, 3, 4, 3, seed=2)
    split = make_split(30, 5, 5, seed=2)
    save_dataset(tmp_path, ds, split)
    back, back_split = load_dataset(tmp_path)
    assert np.array_equal(back.image_features, ds.image_features)
    assert np.array_equal(back.text_features, ds.text_features)
    assert np.array_equal(back.labels, ds.labels)
    for part in ("train", "query", "val"):
        assert np.array_equal(getattr(back_split, part), getattr(split, part))


def test_ragged_row_names_line(tmp_path):
    path = tmp_path / "f.tsv"
    path.write_text("1\t2\t3\t4\n1\t2\t3\n")
    with pytest.raises(ParseError) as info:
        load_features(path)
    assert info.value.line == 2
    assert "2" in str(info.value)


def test_bad_tokens(tmp_path):
    path = tmp_path / "f.tsv"
    path.write_text("1\tx\n")
    with pytest.raises(ParseError):
        load_features(path)
    lab = tmp_path / "l.tsv"
    lab.write_text("0\t1\n2\t0\n")
    with pytest.raises(ParseError) as info:
        load_labels(lab)
    assert info.value.line == 2
    with pytest.raises(ConfigError):
        save_labels(lab, [[2]])


def test_split_file_errors(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("train: 0 1\nquery: 2\n")
    with pytest.raises(ParseError):
        load_split(path)
    path.write_text("train: 0 1\nquery: 1\nval:\n")
    with pytest.raises(ParseError):
        load_split(path)


def test_features_round_trip_exact(tmp_path):
    M = np.random.default_rng(0).normal(size=(4, 3)) * 1e-7
    save_features(tmp_path / "m.tsv", M)
    assert np.array_equal(load_features(tmp_path / "m.tsv"), M)
