import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from nmpqat.data import (CsvError, Dataset, SplitSpec, fit_standardizer, load_csv, split,
                         standardize, synth_tabular)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- CSV ---------------------------------------------------------------------

def test_csv_named_target(tmp_path):
    ds = load_csv(write(tmp_path, "a,y,b\n1,10,2\n3,30,4\n"), "y")
    np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ds.targets, [10, 30])
    assert ds.feature_names == ["a", "b"] and ds.task == "regression"


def test_csv_index_target_no_header(tmp_path):
    ds = load_csv(write(tmp_path, "1;2;5\n3;4;6\n"), -1, header=False, delimiter=";")
    np.testing.assert_array_equal(ds.targets, [5, 6])
    assert ds.feature_names is None


def test_csv_blank_lines_skipped(tmp_path):
    assert load_csv(write(tmp_path, "a,y\n1,2\n\n3,4\n"), "y").n_rows == 2


def test_csv_non_numeric_reports_line_and_column(tmp_path):
    with pytest.raises(CsvError, match=r":3: non-numeric value 'x' in b"):
        load_csv(write(tmp_path, "a,b,y\n1,2,3\n4,x,6\n"), "y")


def test_csv_ragged_row(tmp_path):
    with pytest.raises(CsvError, match=r":3: expected 3 fields, found 2"):
        load_csv(write(tmp_path, "a,b,y\n1,2,3\n4,5\n"), "y")


def test_csv_non_finite(tmp_path):
    with pytest.raises(CsvError, match="non-finite value in a"):
        load_csv(write(tmp_path, "a,y\nnan,1\n"), "y")


@pytest.mark.parametrize("text,target,msg", [
    ("", "y", "empty file"),
    ("a,y\n", "y", "no data rows"),
    ("a,y\n1,2\n", "z", "not found"),
    ("a,y\n1,q\n", "y", "non-numeric regression target"),
])
def test_csv_errors(tmp_path, text, target, msg):
    with pytest.raises(CsvError, match=msg):
        load_csv(write(tmp_path, text), target)


def test_csv_named_target_needs_header(tmp_path):
    with pytest.raises(CsvError, match="header"):
        load_csv(write(tmp_path, "1,2\n"), "y", header=False)


def test_csv_classification_labels(tmp_path):
    p = write(tmp_path, "a,y\n1,cat\n2,dog\n3,cat\n")
    ds = load_csv(p, "y", task="classification")
    assert ds.label_map == ["cat", "dog"] and ds.n_classes == 2
    np.testing.assert_array_equal(ds.targets, [0, 1, 0])
    fixed = load_csv(p, "y", task="classification", label_map=["dog", "cat"])
    np.testing.assert_array_equal(fixed.targets, [1, 0, 1])
    with pytest.raises(CsvError, match="label map"):
        load_csv(p, "y", task="classification", label_map=["cat"])


# --- splitting ---------------------------------------------------------------

def toy(n, d=3):
    return Dataset(np.arange(n * d, dtype=float).reshape(n, d), np.arange(n, dtype=float))


def test_split_sizes_example():
    tr, va, te = split(toy(10), SplitSpec(0.6, 0.2, 0.2, seed=0))
    assert (tr.n_rows, va.n_rows, te.n_rows) == (6, 2, 2)


@pytest.mark.parametrize("fr", [(0.9, 0.2, 0.1), (0.5, 0.2, 0.2)])
def test_split_must_sum_to_one(fr):
    with pytest.raises(ValueError, match="sum to 1"):
        SplitSpec(*fr)


def test_split_rejects_negative_and_tiny():
    with pytest.raises(ValueError):
        SplitSpec(1.2, -0.1, -0.1)
    with pytest.raises(ValueError):
        split(toy(2), SplitSpec())


@given(st.integers(10, 300), st.integers(0, 10**6),
       st.sampled_from([(0.7, 0.15, 0.15), (0.6, 0.2, 0.2), (0.8, 0.0, 0.2)]))
def test_split_is_partition(n, seed, fr):
    parts = split(toy(n, 1), SplitSpec(*fr, seed=seed))
    ids = np.concatenate([p.targets for p in parts])
    np.testing.assert_array_equal(np.sort(ids), np.arange(n))
    again = split(toy(n, 1), SplitSpec(*fr, seed=seed))
    for a, b in zip(parts, again):
        np.testing.assert_array_equal(a.targets, b.targets)


# --- standardization ---------------------------------------------------------

def test_standardize_train_moments(rng):
    ds = Dataset(rng.normal(5.0, 3.0, size=(200, 4)), rng.standard_normal(200))
    z = standardize(ds, fit_standardizer(ds))
    np.testing.assert_allclose(z.features.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.features.std(axis=0), 1.0, atol=1e-12)


def test_standardize_constant_feature(rng, caplog):
    x = np.column_stack([rng.standard_normal(50), np.full(50, 7.0)])
    ds = Dataset(x, np.zeros(50))
    with caplog.at_level(logging.WARNING, logger="nmpqat.data"):
        stats = fit_standardizer(ds)
    assert "constant" in caplog.text
    z = standardize(ds, stats)
    np.testing.assert_array_equal(z.features[:, 1], 7.0)
    assert np.all(np.isfinite(z.features))


def test_standardize_uses_train_statistics_only(rng):
    ds = Dataset(rng.standard_normal((100, 3)), np.zeros(100))
    tr, _, te = split(ds, SplitSpec(0.6, 0.2, 0.2))
    stats = fit_standardizer(tr)
    shifted = Dataset(te.features + 1000.0, te.targets)
    np.testing.assert_array_equal(fit_standardizer(tr).mean, stats.mean)
    np.testing.assert_allclose(standardize(shifted, stats).features,
                               standardize(te, stats).features + 1000.0 / stats.std)


# --- synthetic tasks ---------------------------------------------------------

@pytest.mark.parametrize("kind", ["regression_nonlinear", "classification_blobs",
                                  "classification_moons"])
def test_synthetic_determinism(kind):
    a = synth_tabular(kind, n=200, d=5, seed=3)
    b = synth_tabular(kind, n=200, d=5, seed=3)
    c = synth_tabular(kind, n=200, d=5, seed=4)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.targets, b.targets)
    assert not np.array_equal(a.features, c.features)
    assert a.features.shape == (200, 5)


def test_blobs_linearly_separable():
    ds = synth_tabular("classification_blobs", n=1000, d=8, seed=0, n_classes=3)
    clf = LogisticRegression(max_iter=1000).fit(ds.features, ds.targets)
    assert clf.score(ds.features, ds.targets) >= 0.99


def test_regression_noise_level():
    clean = synth_tabular("regression_nonlinear", n=500, d=4, noise=0.0, seed=1)
    noisy = synth_tabular("regression_nonlinear", n=500, d=4, noise=0.1, seed=1)
    np.testing.assert_array_equal(clean.features, noisy.features)
    assert np.std(noisy.targets - clean.targets) == pytest.approx(0.1, rel=0.15)


def test_synthetic_errors():
    with pytest.raises(ValueError):
        synth_tabular("spirals", n=100, d=4)
    with pytest.raises(ValueError):
        synth_tabular("regression_nonlinear", n=5, d=4)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(ValueError, match="out of range"):
        Dataset(np.zeros((2, 1)), [0, 2], "classification", 2)
