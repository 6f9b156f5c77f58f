import numpy as np
import pytest

from dspn.data import (ArityViolation, ConstantColumnWarning, ParseError,
                       SequenceDataset, apply_thresholds, discretize,
                       fold_indices, load_dataset, save_dataset, split)


def random_dataset(rng, n_vars=None, count=None):
    n_vars = n_vars or int(rng.integers(1, 5))
    arities = tuple(int(rng.integers(2, 5)) for _ in range(n_vars))
    count = count or int(rng.integers(1, 8))
    seqs = []
    for _ in range(count):
        T = int(rng.integers(1, 10))
        seq = np.stack([[int(rng.integers(-1, a)) for a in arities]
                        for _ in range(T)])
        seqs.append(seq)
    return SequenceDataset(seqs, arities, name=f"rand{rng.integers(1e6)}")


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(1000):
        ds = random_dataset(rng)
        path = tmp_path / f"ds{i % 4}.seqs"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.arities == ds.arities
        assert back.name == ds.name
        assert len(back) == len(ds)
        for a, b in zip(ds.sequences, back.sequences):
            np.testing.assert_array_equal(a, b)


def test_empty_sequence_line_rejected(tmp_path):
    path = tmp_path / "bad.seqs"
    path.write_text('{"n": 1, "arities": [2], "name": "x"}\n[[0]]\n[]\n')
    with pytest.raises(ParseError) as err:
        load_dataset(path)
    assert err.value.line == 3


def test_wrong_width_slice_rejected(tmp_path):
    path = tmp_path / "bad.seqs"
    path.write_text('{"n": 2, "arities": [2, 2], "name": "x"}\n[[0, 1], [1]]\n')
    with pytest.raises(ParseError) as err:
        load_dataset(path)
    assert err.value.line == 2


def test_arity_violation_reports_location(tmp_path):
    path = tmp_path / "bad.seqs"
    path.write_text('{"n": 2, "arities": [2, 3], "name": "x"}\n'
                    '[[0, 2]]\n[[1, 0], [0, 5]]\n')
    with pytest.raises(ArityViolation) as err:
        load_dataset(path)
    assert err.value.location == (1, 1, 1)


def test_pendigits_like_shape_loads(tmp_path):
    rng = np.random.default_rng(1)
    arities = tuple([2] * 7)
    seqs = [np.stack([[int(rng.integers(2)) for _ in range(7)]
                      for _ in range(16)]) for _ in range(25)]
    path = tmp_path / "pen.seqs"
    save_dataset(SequenceDataset(seqs, arities, "pen"), path)
    back = load_dataset(path)
    assert back.n_vars == 7
    assert set(back.lengths()) == {16}


def test_split_even():
    ds = random_dataset(np.random.default_rng(2), count=10)
    train, val = split(ds, 0.5)
    assert len(train) == 5 and len(val) == 5


def test_split_disjoint_and_covering():
    ds = random_dataset(np.random.default_rng(3), count=9)
    train, val = split(ds, 0.25)
    assert len(train) + len(val) == len(ds)
    joined = train.sequences + val.sequences
    for a, b in zip(joined, ds.sequences):
        np.testing.assert_array_equal(a, b)


def test_split_is_stable_across_runs():
    ds = random_dataset(np.random.default_rng(4), count=12)
    snapshots = []
    for _ in range(3):
        train, val = split(ds, 0.3)
        snapshots.append((tuple(map(len, train.sequences)),
                          tuple(map(len, val.sequences))))
    assert len(set(snapshots)) == 1


def test_fold_indices_partition_everything():
    blocks = fold_indices(11, 3)
    joined = np.concatenate(blocks)
    np.testing.assert_array_equal(np.sort(joined), np.arange(11))


def test_discretize_median_split():
    rng = np.random.default_rng(5)
    raw = [rng.normal(size=(50, 1)) for _ in range(8)]
    ds, thresholds = discretize(raw, bins=2)
    pooled = np.concatenate(raw)[:, 0]
    binned = np.concatenate([s[:, 0] for s in ds.sequences])
    assert abs((binned == 0).sum() - (binned == 1).sum()) <= 1
    assert thresholds[0].shape == (1,)
    assert np.quantile(pooled, 0.45) < thresholds[0][0] < np.quantile(pooled, 0.55)


def test_equal_frequency_populations():
    rng = np.random.default_rng(6)
    raw = [rng.normal(size=(97, 3))]
    ds, _ = discretize(raw, bins=4)
    pooled = np.concatenate([s for s in ds.sequences])
    for v in range(3):
        counts = np.bincount(pooled[:, v], minlength=4)
        assert counts.max() - counts.min() <= 1


def test_reapplying_thresholds_is_idempotent():
    rng = np.random.default_rng(7)
    raw = [rng.normal(size=(30, 2)) for _ in range(5)]
    ds, thresholds = discretize(raw, bins=3)
    again = apply_thresholds(raw, thresholds)
    for a, b in zip(ds.sequences, again.sequences):
        np.testing.assert_array_equal(a, b)


def test_constant_column_falls_back_to_single_bin():
    raw = [np.stack([np.ones(20), np.arange(20.0)], axis=1)]
    with pytest.warns(ConstantColumnWarning):
        ds, thresholds = discretize(raw, bins=2)
    assert ds.arities == (1, 2)
    assert (ds.sequences[0][:, 0] == 0).all()


def test_missing_values_round_trip(tmp_path):
    ds = SequenceDataset([np.array([[0, -1], [1, 1]])], (2, 2), "m")
    path = tmp_path / "m.seqs"
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.sequences[0], ds.sequences[0])
